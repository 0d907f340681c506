/**
 * Training loop: AdamW over the LoRA parameters only, with gradient
 * accumulation, periodic checkpointing, and a JSON training log.  Final
 * adapters are emitted in the shared binary format, one file per target
 * module.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { writeAdapterFile } from './adapter.js';
import { Batch, ChatSample, collate, loadChatDataset } from './dataset.js';
import { TARGET_MODULES, TinyVlm } from './model.js';

export interface TrainingConfig {
  epochs: number;
  batch_size: number;
  learning_rate: number;
  gradient_accumulation: number;
  mixed_precision: boolean;
  rank: number;
  alpha: number;
  dropout: number;
  target_modules: string[];
  quantization_bits: number;
  seed: number;
  checkpoint_period: number;
  d_model: number;
  d_ff: number;
}

export const DEFAULT_CONFIG: TrainingConfig = {
  epochs: 20,
  batch_size: 2,
  learning_rate: 2e-5,
  gradient_accumulation: 1,
  mixed_precision: false,
  rank: 16,
  alpha: 32,
  dropout: 0.1,
  target_modules: [...TARGET_MODULES],
  quantization_bits: 4,
  seed: 0,
  checkpoint_period: 10,
  d_model: 32,
  d_ff: 64,
};

export function loadTrainingConfig(configPath?: string): TrainingConfig {
  if (!configPath) return { ...DEFAULT_CONFIG };
  const overrides = JSON.parse(fs.readFileSync(configPath, 'utf-8'));
  return { ...DEFAULT_CONFIG, ...overrides };
}

export interface StepLog {
  step: number;
  epoch: number;
  loss: number;
}

export interface TrainingLog {
  steps: StepLog[];
  checkpoints: string[];
  wall_time_s: number;
  samples: number;
  optimizer: Record<string, number | string>;
  config: TrainingConfig;
  note?: string;
}

/** Decoupled-weight-decay Adam over a fixed variable list. */
class AdamW {
  private m = new Map<tf.Variable, tf.Tensor>();
  private v = new Map<tf.Variable, tf.Tensor>();
  private t = 0;

  constructor(
    private readonly lr: number,
    private readonly beta1 = 0.9,
    private readonly beta2 = 0.999,
    private readonly eps = 1e-8,
    private readonly weightDecay = 0.0,
  ) {}

  describe(): Record<string, number | string> {
    return {
      name: 'adamw',
      learning_rate: this.lr,
      beta1: this.beta1,
      beta2: this.beta2,
      eps: this.eps,
      weight_decay: this.weightDecay,
    };
  }

  apply(grads: Map<tf.Variable, tf.Tensor>): void {
    this.t += 1;
    for (const [variable, grad] of grads) {
      const m0 = this.m.get(variable) ?? tf.zerosLike(variable);
      const v0 = this.v.get(variable) ?? tf.zerosLike(variable);
      const m1 = tf.tidy(() => m0.mul(this.beta1).add(grad.mul(1 - this.beta1)));
      const v1 = tf.tidy(() => v0.mul(this.beta2).add(grad.square().mul(1 - this.beta2)));
      m0.dispose();
      v0.dispose();
      this.m.set(variable, m1);
      this.v.set(variable, v1);
      const update = tf.tidy(() => {
        const mHat = m1.div(1 - Math.pow(this.beta1, this.t));
        const vHat = v1.div(1 - Math.pow(this.beta2, this.t));
        const step = mHat.div(vHat.sqrt().add(this.eps)).add(variable.mul(this.weightDecay));
        return variable.sub(step.mul(this.lr));
      });
      variable.assign(update as tf.Tensor<tf.Rank>);
      update.dispose();
    }
  }

  dispose(): void {
    for (const t of this.m.values()) t.dispose();
    for (const t of this.v.values()) t.dispose();
  }
}

function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let z = state;
    z = Math.imul(z ^ (z >>> 15), z | 1);
    z ^= z + Math.imul(z ^ (z >>> 7), z | 61);
    return ((z ^ (z >>> 14)) >>> 0) / 4294967296;
  };
}

function shuffled<T>(items: T[], rand: () => number): T[] {
  const out = [...items];
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [out[i], out[j]] = [out[j], out[i]];
  }
  return out;
}

function chunk<T>(items: T[], size: number): T[][] {
  const out: T[][] = [];
  for (let i = 0; i < items.length; i += size) out.push(items.slice(i, i + size));
  return out;
}

export function emitAdapters(model: TinyVlm, outDir: string, config: TrainingConfig): string[] {
  const written: string[] = [];
  for (const name of config.target_modules) {
    const payload = model.adapterPayload(name);
    const filePath = path.join(outDir, `${name}.lora`);
    writeAdapterFile(filePath, name, {
      ...payload,
      r: config.rank,
      alpha: config.alpha,
    });
    written.push(filePath);
  }
  return written;
}

export interface TrainResult {
  log: TrainingLog;
  adapterFiles: string[];
  model: TinyVlm;
}

export function train(
  datasetPath: string,
  config: TrainingConfig,
  outDir: string,
  imagesDir: string,
  options: { keepModel?: boolean } = {},
): TrainResult {
  const started = Date.now();
  const samples = loadChatDataset(datasetPath);
  fs.mkdirSync(outDir, { recursive: true });
  const optimizer = new AdamW(config.learning_rate);
  const log: TrainingLog = {
    steps: [],
    checkpoints: [],
    wall_time_s: 0,
    samples: samples.length,
    optimizer: optimizer.describe(),
    config,
  };

  const model = new TinyVlm({
    dModel: config.d_model,
    dFf: config.d_ff,
    rank: config.rank,
    alpha: config.alpha,
    dropout: config.dropout,
    seed: config.seed,
    targetModules: config.target_modules,
  });

  if (config.epochs === 0) {
    log.note = 'epochs=0: no training steps executed, no adapters emitted';
    log.wall_time_s = (Date.now() - started) / 1000;
    writeLog(outDir, log);
    if (!options.keepModel) model.dispose();
    return { log, adapterFiles: [], model };
  }
  if (config.mixed_precision) {
    log.note = 'mixed_precision requested; CPU backend computes in fp32';
  }

  const variables = model.trainableVariables();
  const rand = mulberry32(config.seed + 1);
  let step = 0;
  for (let epoch = 0; epoch < config.epochs; epoch++) {
    const order = shuffled(samples, rand);
    const microbatches = chunk(order, config.batch_size);
    for (const window of chunk(microbatches, config.gradient_accumulation)) {
      const accumulated = new Map<tf.Variable, tf.Tensor>();
      let windowLoss = 0;
      for (const micro of window) {
        const batch: Batch = collate(micro as ChatSample[], imagesDir);
        const stepSeed = config.seed + 7919 * (step + 1);
        const { value, grads } = tf.variableGrads(
          () => model.loss(batch, true, stepSeed),
          variables,
        );
        windowLoss += value.dataSync()[0];
        value.dispose();
        for (const variable of variables) {
          const grad = grads[variable.name];
          if (!grad) continue;
          const existing = accumulated.get(variable);
          if (existing) {
            const sum = existing.add(grad);
            existing.dispose();
            grad.dispose();
            accumulated.set(variable, sum);
          } else {
            accumulated.set(variable, grad);
          }
        }
      }
      const scaled = new Map<tf.Variable, tf.Tensor>();
      for (const [variable, grad] of accumulated) {
        scaled.set(variable, grad.div(window.length));
        grad.dispose();
      }
      optimizer.apply(scaled);
      for (const grad of scaled.values()) grad.dispose();
      step += 1;
      log.steps.push({ step, epoch, loss: windowLoss / window.length });
      if (config.checkpoint_period > 0 && step % config.checkpoint_period === 0) {
        const ckptDir = path.join(outDir, 'checkpoints', `step-${step}`);
        emitAdapters(model, ckptDir, config);
        log.checkpoints.push(ckptDir);
      }
    }
  }

  const adapterFiles = emitAdapters(model, path.join(outDir, 'adapters'), config);
  log.wall_time_s = (Date.now() - started) / 1000;
  writeLog(outDir, log);
  optimizer.dispose();
  if (!options.keepModel) model.dispose();
  return { log, adapterFiles, model };
}

function writeLog(outDir: string, log: TrainingLog): void {
  fs.writeFileSync(path.join(outDir, 'training_log.json'), JSON.stringify(log, null, 2) + '\n');
}

export function epochMeanLosses(log: TrainingLog): number[] {
  const byEpoch = new Map<number, number[]>();
  for (const entry of log.steps) {
    const list = byEpoch.get(entry.epoch) ?? [];
    list.push(entry.loss);
    byEpoch.set(entry.epoch, list);
  }
  return [...byEpoch.keys()]
    .sort((a, b) => a - b)
    .map((epoch) => {
      const losses = byEpoch.get(epoch)!;
      return losses.reduce((a, b) => a + b, 0) / losses.length;
    });
}
