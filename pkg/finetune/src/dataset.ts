/**
 * Load the exported chat-format dataset and collate it into training batches.
 *
 * Tokenization is byte-level with two specials (PAD, IMG).  The collator
 * applies the chat template, expands the image reference into IMG token
 * positions, pads to the batch maximum, and builds next-token labels in
 * which padding and image positions are masked out of the loss.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

export const PAD_ID = 256;
export const IMG_ID = 257;
export const VOCAB_SIZE = 258;
export const IMG_TOKENS = 4;
export const IMAGE_FEATURE_DIM = 32;

export class DatasetFormatError extends Error {}

export interface ChatSample {
  system: string;
  imageFile: string;
  question: string;
  answer: string;
}

interface RawMessage {
  role: string;
  content: unknown;
}

export function loadChatDataset(filePath: string): ChatSample[] {
  let parsed: unknown;
  try {
    parsed = JSON.parse(fs.readFileSync(filePath, 'utf-8'));
  } catch (err) {
    throw new DatasetFormatError(`${filePath}: ${(err as Error).message}`);
  }
  if (!Array.isArray(parsed)) {
    throw new DatasetFormatError(`${filePath}: expected a JSON array of chat records`);
  }
  return parsed.map((record, index) => parseRecord(record, index));
}

function parseRecord(record: unknown, index: number): ChatSample {
  const messages = (record as { messages?: RawMessage[] }).messages;
  if (!Array.isArray(messages) || messages.length !== 3) {
    throw new DatasetFormatError(`record ${index}: expected exactly three messages`);
  }
  const [system, user, assistant] = messages;
  if (system.role !== 'system' || user.role !== 'user' || assistant.role !== 'assistant') {
    throw new DatasetFormatError(`record ${index}: roles must be system, user, assistant in order`);
  }
  if (typeof system.content !== 'string' || typeof assistant.content !== 'string') {
    throw new DatasetFormatError(`record ${index}: system/assistant content must be strings`);
  }
  const parts = user.content;
  if (!Array.isArray(parts) || parts.length !== 2) {
    throw new DatasetFormatError(`record ${index}: user content must be [image, text] parts`);
  }
  const [imagePart, textPart] = parts as Array<Record<string, string>>;
  if (imagePart.type !== 'image' || typeof imagePart.image !== 'string') {
    throw new DatasetFormatError(`record ${index}: first user part must reference an image`);
  }
  if (textPart.type !== 'text' || typeof textPart.text !== 'string') {
    throw new DatasetFormatError(`record ${index}: second user part must be the question text`);
  }
  return {
    system: system.content,
    imageFile: imagePart.image,
    question: textPart.text,
    answer: assistant.content,
  };
}

/** Toy visual encoder: normalized 32-bin byte histogram of the image file. */
export function imageFeature(imagesDir: string, imageFile: string): Float32Array {
  const filePath = path.join(imagesDir, imageFile);
  if (!fs.existsSync(filePath)) {
    throw new DatasetFormatError(`image file missing: ${filePath}`);
  }
  const bytes = fs.readFileSync(filePath);
  const bins = new Float32Array(IMAGE_FEATURE_DIM);
  for (const byte of bytes) bins[byte % IMAGE_FEATURE_DIM] += 1;
  const total = bytes.length || 1;
  for (let i = 0; i < bins.length; i++) bins[i] /= total;
  return bins;
}

function encodeText(text: string): number[] {
  return Array.from(Buffer.from(text, 'utf-8'));
}

/** Chat template applied before tokenization; IMG_TOKENS slots stand in for the image. */
export function encodeSample(sample: ChatSample): number[] {
  const ids: number[] = [];
  ids.push(...encodeText(`<|system|>\n${sample.system}\n<|user|>\n`));
  for (let i = 0; i < IMG_TOKENS; i++) ids.push(IMG_ID);
  ids.push(...encodeText(`\n${sample.question}\n<|assistant|>\n${sample.answer}\n<|end|>`));
  return ids;
}

export interface Batch {
  ids: Int32Array[]; // per-sample padded token rows
  labels: Int32Array[]; // next-token targets, same shape
  lossMask: Float32Array[]; // 1 where the label counts, 0 at padding/image targets
  imageFeatures: Float32Array[];
  seqLen: number;
}

export function collate(samples: ChatSample[], imagesDir: string): Batch {
  const encoded = samples.map(encodeSample);
  const seqLen = Math.max(...encoded.map((row) => row.length));
  const ids: Int32Array[] = [];
  const labels: Int32Array[] = [];
  const lossMask: Float32Array[] = [];
  for (const row of encoded) {
    const padded = new Int32Array(seqLen).fill(PAD_ID);
    padded.set(row);
    const target = new Int32Array(seqLen).fill(PAD_ID);
    const mask = new Float32Array(seqLen);
    for (let t = 0; t < seqLen - 1; t++) {
      target[t] = padded[t + 1];
      const labelIsSpecial = target[t] === PAD_ID || target[t] === IMG_ID;
      const positionIsPadding = padded[t] === PAD_ID;
      mask[t] = labelIsSpecial || positionIsPadding ? 0 : 1;
    }
    ids.push(padded);
    labels.push(target);
    lossMask.push(mask);
  }
  return {
    ids,
    labels,
    lossMask,
    imageFeatures: samples.map((s) => imageFeature(imagesDir, s.imageFile)),
    seqLen,
  };
}
