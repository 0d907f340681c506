/**
 * Binary adapter files shared with the evaluation pipeline.
 *
 * Layout (little-endian):
 *   magic    8 bytes  "LORADPT1"
 *   d        uint32   rows of the target weight / rows of A
 *   k        uint32   cols of the target weight / cols of B
 *   r        uint32   rank
 *   alpha    float32
 *   nameLen  uint32
 *   name     utf-8 bytes (target module name)
 *   A        d*r float32, row-major
 *   B        r*k float32, row-major
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

const MAGIC = Buffer.from('LORADPT1', 'ascii');

export interface AdapterPayload {
  d: number;
  k: number;
  r: number;
  alpha: number;
  a: Float32Array; // d x r, row-major
  b: Float32Array; // r x k, row-major
}

export function encodeAdapter(name: string, payload: AdapterPayload): Buffer {
  const { d, k, r, alpha, a, b } = payload;
  if (a.length !== d * r) throw new Error(`A has ${a.length} values, expected ${d * r}`);
  if (b.length !== r * k) throw new Error(`B has ${b.length} values, expected ${r * k}`);
  const nameBytes = Buffer.from(name, 'utf-8');
  const header = Buffer.alloc(MAGIC.length + 20);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(d, 8);
  header.writeUInt32LE(k, 12);
  header.writeUInt32LE(r, 16);
  header.writeFloatLE(alpha, 20);
  header.writeUInt32LE(nameBytes.length, 24);
  const aBuf = Buffer.from(new Float32Array(a).buffer.slice(0));
  const bBuf = Buffer.from(new Float32Array(b).buffer.slice(0));
  return Buffer.concat([header, nameBytes, aBuf, bBuf]);
}

export function writeAdapterFile(filePath: string, name: string, payload: AdapterPayload): void {
  fs.mkdirSync(path.dirname(filePath), { recursive: true });
  fs.writeFileSync(filePath, encodeAdapter(name, payload));
}

/** Reader counterpart, used by tests to verify what went to disk. */
export function readAdapterFile(filePath: string): { name: string } & AdapterPayload {
  const blob = fs.readFileSync(filePath);
  if (blob.length < 28 || !blob.subarray(0, 8).equals(MAGIC)) {
    throw new Error(`${filePath}: not a LORADPT1 adapter file`);
  }
  const d = blob.readUInt32LE(8);
  const k = blob.readUInt32LE(12);
  const r = blob.readUInt32LE(16);
  const alpha = blob.readFloatLE(20);
  const nameLen = blob.readUInt32LE(24);
  let offset = 28;
  const name = blob.subarray(offset, offset + nameLen).toString('utf-8');
  offset += nameLen;
  const expected = offset + 4 * (d * r + r * k);
  if (blob.length !== expected) {
    throw new Error(`${filePath}: expected ${expected} bytes, found ${blob.length}`);
  }
  const a = new Float32Array(d * r);
  for (let i = 0; i < a.length; i++) a[i] = blob.readFloatLE(offset + 4 * i);
  offset += 4 * d * r;
  const b = new Float32Array(r * k);
  for (let i = 0; i < b.length; i++) b[i] = blob.readFloatLE(offset + 4 * i);
  return { name, d, k, r, alpha, a, b };
}
