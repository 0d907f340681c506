/**
 * Desk-scale vision-language model used to exercise the training loop.
 *
 * One causal self-attention block plus a gated feed-forward over byte-level
 * tokens; a visual projection injects an image feature vector at the IMG
 * token positions.  All base weights are frozen; the only trainable
 * parameters are the low-rank A/B pairs attached to the named target
 * modules, applied as W + (alpha/r)·A·B.
 */

import * as tf from '@tensorflow/tfjs';

import { Batch, IMAGE_FEATURE_DIM, IMG_ID, PAD_ID, VOCAB_SIZE } from './dataset.js';

export const TARGET_MODULES = [
  'q_proj',
  'k_proj',
  'v_proj',
  'gate_proj',
  'down_proj',
  'up_proj',
  'visual_proj',
] as const;

export type TargetModule = (typeof TARGET_MODULES)[number];

export interface ModelConfig {
  dModel: number;
  dFf: number;
  rank: number;
  alpha: number;
  dropout: number;
  seed: number;
  targetModules: string[];
}

export interface LoraPair {
  a: tf.Variable<tf.Rank.R2>;
  b: tf.Variable<tf.Rank.R2>;
}

export class TinyVlm {
  readonly config: ModelConfig;
  readonly base: Record<string, tf.Tensor2D> = {};
  readonly lora: Record<string, LoraPair> = {};
  private embedding: tf.Tensor2D;

  constructor(config: ModelConfig) {
    this.config = config;
    const { dModel, dFf, rank, seed } = config;
    if (rank < 1) throw new Error('rank must be >= 1');
    const shapes = this.moduleShapes();
    for (const name of Object.keys(shapes)) {
      const [d, k] = shapes[name];
      if (rank > Math.min(d, k)) {
        throw new Error(`rank ${rank} exceeds min dimension of ${name} (${d}x${k})`);
      }
    }
    this.embedding = tf.randomNormal([VOCAB_SIZE, dModel], 0, 0.3, 'float32', seed) as tf.Tensor2D;
    let offset = 1;
    for (const [name, [d, k]] of Object.entries(shapes)) {
      this.base[name] = tf.randomNormal([d, k], 0, 1 / Math.sqrt(d), 'float32', seed + offset) as tf.Tensor2D;
      offset += 1;
      if (config.targetModules.includes(name)) {
        this.lora[name] = {
          a: tf.variable(
            tf.randomNormal([d, rank], 0, 1 / Math.sqrt(d), 'float32', seed + 1000 + offset),
            true,
          ) as tf.Variable<tf.Rank.R2>,
          b: tf.variable(tf.zeros([rank, k]), true) as tf.Variable<tf.Rank.R2>,
        };
      }
    }
    void dFf;
  }

  moduleShapes(): Record<string, [number, number]> {
    const { dModel, dFf } = this.config;
    return {
      q_proj: [dModel, dModel],
      k_proj: [dModel, dModel],
      v_proj: [dModel, dModel],
      gate_proj: [dModel, dFf],
      up_proj: [dModel, dFf],
      down_proj: [dFf, dModel],
      visual_proj: [IMAGE_FEATURE_DIM, dModel],
    };
  }

  trainableVariables(): tf.Variable[] {
    return Object.values(this.lora).flatMap((pair) => [pair.a, pair.b]);
  }

  /** x @ (W + (alpha/r)·A·B), with optional LoRA-path dropout during training.
   *
   * Inputs are flattened to 2-D before the matmuls: broadcasting a rank-2
   * weight against a rank-3 activation breaks the js backend's gradients.
   */
  private project(
    x: tf.Tensor,
    name: string,
    training: boolean,
    stepSeed: number,
  ): tf.Tensor {
    const rank3 = x.shape.length === 3;
    const outDim = this.base[name].shape[1];
    const flat = rank3 ? x.reshape([x.shape[0]! * x.shape[1]!, x.shape[2]!]) : x;
    const baseOut = tf.matMul(flat, this.base[name]);
    const pair = this.lora[name];
    let out: tf.Tensor = baseOut;
    if (pair) {
      const scale = this.config.alpha / this.config.rank;
      let loraInput = flat;
      if (training && this.config.dropout > 0) {
        loraInput = tf.dropout(flat, this.config.dropout, undefined, stepSeed);
      }
      out = baseOut.add(tf.matMul(tf.matMul(loraInput, pair.a), pair.b).mul(scale));
    }
    return rank3 ? out.reshape([x.shape[0]!, x.shape[1]!, outDim]) : out;
  }

  /** Masked mean cross-entropy over the batch. */
  loss(batch: Batch, training = false, stepSeed = 0): tf.Scalar {
    return tf.tidy(() => {
      const batchSize = batch.ids.length;
      const seqLen = batch.seqLen;
      const flatIds = new Int32Array(batchSize * seqLen);
      batch.ids.forEach((row, i) => flatIds.set(row, i * seqLen));
      const ids = tf.tensor2d(flatIds, [batchSize, seqLen], 'int32');

      let x = tf.gather(this.embedding, ids); // [B, T, d]

      // splice the projected image feature into IMG positions
      const features = tf.tensor2d(
        batch.imageFeatures.reduce<number[]>((acc, f) => acc.concat(Array.from(f)), []),
        [batchSize, IMAGE_FEATURE_DIM],
      );
      const imgEmb = this.project(features, 'visual_proj', training, stepSeed).expandDims(1); // [B,1,d]
      const isImg = tf.equal(ids, IMG_ID).cast('float32').expandDims(-1); // [B,T,1]
      x = x.mul(tf.scalar(1).sub(isImg)).add(imgEmb.mul(isImg));

      // single-head causal self-attention with padding keys masked
      const dModel = this.config.dModel;
      const q = this.project(x, 'q_proj', training, stepSeed + 1);
      const k = this.project(x, 'k_proj', training, stepSeed + 2);
      const v = this.project(x, 'v_proj', training, stepSeed + 3);
      const scores = tf.matMul(q, k, false, true).div(Math.sqrt(dModel)); // [B,T,T]
      const causal = tf.linalg.bandPart(tf.ones([seqLen, seqLen]), -1, 0).expandDims(0);
      const keyOk = tf.notEqual(ids, PAD_ID).cast('float32').expandDims(1); // [B,1,T]
      const allowed = causal.mul(keyOk);
      const masked = scores.add(allowed.sub(1).mul(1e9));
      const context = tf.matMul(tf.softmax(masked), v);
      x = x.add(context);

      // gated feed-forward
      const gate = this.project(x, 'gate_proj', training, stepSeed + 4);
      const up = this.project(x, 'up_proj', training, stepSeed + 5);
      const hidden = tf.sigmoid(gate).mul(gate).mul(up); // SiLU(gate) * up
      const down = this.project(hidden, 'down_proj', training, stepSeed + 6);
      x = x.add(down);

      const flat = x.reshape([batchSize * seqLen, dModel]);
      const logits = tf.matMul(flat, this.embedding, false, true).reshape([
        batchSize,
        seqLen,
        VOCAB_SIZE,
      ]); // tied output head

      const flatLabels = new Int32Array(batchSize * seqLen);
      batch.labels.forEach((row, i) => flatLabels.set(row, i * seqLen));
      const labels = tf.tensor2d(flatLabels, [batchSize, seqLen], 'int32');
      const flatMask = new Float32Array(batchSize * seqLen);
      batch.lossMask.forEach((row, i) => flatMask.set(row, i * seqLen));
      const mask = tf.tensor2d(flatMask, [batchSize, seqLen]);

      const logProbs = tf.logSoftmax(logits);
      const oneHot = tf.oneHot(labels, VOCAB_SIZE);
      const perToken = oneHot.mul(logProbs).sum(-1).neg(); // [B,T]
      const total = perToken.mul(mask).sum();
      const count = mask.sum().maximum(1e-8);
      return total.div(count).asScalar();
    });
  }

  /** Current adapter values for one module, row-major float32. */
  adapterPayload(name: string): { d: number; k: number; a: Float32Array; b: Float32Array } {
    const pair = this.lora[name];
    if (!pair) throw new Error(`no adapter trained for module ${name}`);
    const [d, k] = this.moduleShapes()[name];
    return {
      d,
      k,
      a: pair.a.dataSync() as Float32Array,
      b: pair.b.dataSync() as Float32Array,
    };
  }

  dispose(): void {
    this.embedding.dispose();
    Object.values(this.base).forEach((t) => t.dispose());
    Object.values(this.lora).forEach((pair) => {
      pair.a.dispose();
      pair.b.dispose();
    });
  }
}
