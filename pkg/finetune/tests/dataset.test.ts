import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';

import { describe, expect, it } from 'vitest';

import {
  DatasetFormatError,
  IMG_ID,
  IMG_TOKENS,
  PAD_ID,
  collate,
  encodeSample,
  loadChatDataset,
} from '../src/dataset.js';
import { TinyVlm } from '../src/model.js';

const FIXTURES = path.join(__dirname, 'fixtures');
const DATASET = path.join(FIXTURES, 'dataset.json');

describe('chat dataset loading', () => {
  it('parses the exported format', () => {
    const samples = loadChatDataset(DATASET);
    expect(samples).toHaveLength(4);
    expect(samples[0].imageFile).toBe('page_0001.png');
    expect(samples[0].answer).toBe('51 mm');
    expect(samples[0].system).toMatch(/exact value/);
  });

  it('rejects malformed records', () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), 'dataset-'));
    const bad = path.join(dir, 'bad.json');
    fs.writeFileSync(bad, JSON.stringify([{ messages: [{ role: 'user', content: 'hi' }] }]));
    expect(() => loadChatDataset(bad)).toThrow(DatasetFormatError);
    fs.writeFileSync(bad, '{"not":"an array"}');
    expect(() => loadChatDataset(bad)).toThrow(DatasetFormatError);
  });

  it('expands the image reference into IMG token slots', () => {
    const samples = loadChatDataset(DATASET);
    const ids = encodeSample(samples[0]);
    expect(ids.filter((id) => id === IMG_ID)).toHaveLength(IMG_TOKENS);
  });
});

describe('collation and label masking', () => {
  it('shifts labels by one and masks padding/image targets', () => {
    const samples = loadChatDataset(DATASET);
    const batch = collate(samples.slice(0, 2), FIXTURES);
    expect(batch.ids).toHaveLength(2);
    for (let row = 0; row < 2; row++) {
      const ids = batch.ids[row];
      const labels = batch.labels[row];
      const mask = batch.lossMask[row];
      for (let t = 0; t < batch.seqLen - 1; t++) {
        expect(labels[t]).toBe(ids[t + 1]);
        if (labels[t] === PAD_ID || labels[t] === IMG_ID || ids[t] === PAD_ID) {
          expect(mask[t]).toBe(0);
        } else {
          expect(mask[t]).toBe(1);
        }
      }
      expect(mask[batch.seqLen - 1]).toBe(0);
    }
  });

  it('loss is invariant to label values at masked positions', () => {
    const samples = loadChatDataset(DATASET);
    const batch = collate(samples.slice(0, 2), FIXTURES);
    const model = new TinyVlm({
      dModel: 16,
      dFf: 32,
      rank: 4,
      alpha: 8,
      dropout: 0,
      seed: 5,
      targetModules: ['q_proj', 'visual_proj'],
    });
    const before = model.loss(batch).dataSync()[0];
    for (const [row, mask] of batch.lossMask.entries()) {
      for (let t = 0; t < batch.seqLen; t++) {
        if (mask[t] === 0) batch.labels[row][t] = (batch.labels[row][t] + 91) % 255;
      }
    }
    const after = model.loss(batch).dataSync()[0];
    model.dispose();
    expect(after).toBeCloseTo(before, 6);
  });
});
