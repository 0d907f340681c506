import { execFileSync } from 'node:child_process';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';

import { describe, expect, it } from 'vitest';

import { readAdapterFile } from '../src/adapter.js';
import { DEFAULT_CONFIG, TrainingConfig, emitAdapters, epochMeanLosses, train } from '../src/train.js';

const FIXTURES = path.join(__dirname, 'fixtures');
const DATASET = path.join(FIXTURES, 'dataset.json');

function tmpDir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), 'train-'));
}

function smokeConfig(overrides: Partial<TrainingConfig> = {}): TrainingConfig {
  // the defaults are the production recipe; the smoke run shrinks epochs and
  // raises the learning rate so four samples show progress in two epochs
  return { ...DEFAULT_CONFIG, epochs: 2, learning_rate: 1e-2, seed: 11, checkpoint_period: 2, ...overrides };
}

describe('training defaults', () => {
  it('carries the production recipe', () => {
    expect(DEFAULT_CONFIG.epochs).toBe(20);
    expect(DEFAULT_CONFIG.batch_size).toBe(2);
    expect(DEFAULT_CONFIG.learning_rate).toBeCloseTo(2e-5, 10);
    expect(DEFAULT_CONFIG.rank).toBe(16);
    expect(DEFAULT_CONFIG.alpha).toBe(32);
    expect(DEFAULT_CONFIG.dropout).toBeCloseTo(0.1, 10);
    expect(DEFAULT_CONFIG.quantization_bits).toBe(4);
    expect([...DEFAULT_CONFIG.target_modules].sort()).toEqual([
      'down_proj',
      'gate_proj',
      'k_proj',
      'q_proj',
      'up_proj',
      'v_proj',
      'visual_proj',
    ]);
  });
});

describe('training loop', () => {
  it('four-sample smoke run: loss falls and adapters land on disk', () => {
    const out = tmpDir();
    const { log, adapterFiles } = train(DATASET, smokeConfig(), out, FIXTURES);
    const means = epochMeanLosses(log);
    expect(means).toHaveLength(2);
    expect(means[1]).toBeLessThan(means[0]);

    expect(adapterFiles).toHaveLength(7);
    for (const file of adapterFiles) {
      const payload = readAdapterFile(file);
      expect(payload.r).toBe(16);
      expect(payload.alpha).toBeCloseTo(32, 5);
      expect(path.basename(file)).toBe(`${payload.name}.lora`);
    }
    const logged = JSON.parse(fs.readFileSync(path.join(out, 'training_log.json'), 'utf-8'));
    expect(logged.steps.length).toBe(log.steps.length);
    expect(logged.optimizer.name).toBe('adamw');
    expect(log.checkpoints.length).toBeGreaterThan(0);
  });

  it('keeps the step-count identity under gradient accumulation', () => {
    const out = tmpDir();
    const config = smokeConfig({ epochs: 3, gradient_accumulation: 2, checkpoint_period: 0 });
    const { log } = train(DATASET, config, out, FIXTURES);
    const expected = Math.ceil((Math.ceil(4 / config.batch_size) * config.epochs) / config.gradient_accumulation);
    expect(Math.abs(log.steps.length - expected)).toBeLessThanOrEqual(1);
  });

  it('epochs=0 is an explicit no-op', () => {
    const out = tmpDir();
    const { log, adapterFiles } = train(DATASET, smokeConfig({ epochs: 0 }), out, FIXTURES);
    expect(log.steps).toHaveLength(0);
    expect(adapterFiles).toHaveLength(0);
    expect(log.note).toMatch(/no training steps/);
    expect(fs.existsSync(path.join(out, 'adapters'))).toBe(false);
    expect(fs.existsSync(path.join(out, 'training_log.json'))).toBe(true);
  });

  it('re-emitting adapters from a fixed state is byte-identical', () => {
    const out = tmpDir();
    const config = smokeConfig({ epochs: 1, checkpoint_period: 0 });
    const { model } = train(DATASET, config, out, FIXTURES, { keepModel: true });
    const dirA = path.join(out, 'emit-a');
    const dirB = path.join(out, 'emit-b');
    emitAdapters(model, dirA, config);
    emitAdapters(model, dirB, config);
    for (const name of config.target_modules) {
      const a = fs.readFileSync(path.join(dirA, `${name}.lora`));
      const b = fs.readFileSync(path.join(dirB, `${name}.lora`));
      expect(a.equals(b)).toBe(true);
    }
    model.dispose();
  });
});

describe('cross-component adapter hand-off', () => {
  it('the evaluation pipeline merges emitted adapters without shape errors', () => {
    const out = tmpDir();
    const { adapterFiles } = train(DATASET, smokeConfig({ epochs: 1, checkpoint_period: 0 }), out, FIXTURES);
    const adapter = adapterFiles.find((f) => f.endsWith('q_proj.lora'))!;
    const payload = readAdapterFile(adapter);

    const weights = path.join(out, 'w.json');
    const zeros = Array.from({ length: payload.d }, () => Array(payload.k).fill(0));
    fs.writeFileSync(weights, JSON.stringify(zeros));
    const merged = path.join(out, 'merged.json');

    execFileSync('python3', [
      '-m', 'tableval', 'merge-adapter',
      '--weights', weights,
      '--adapter', adapter,
      '--out', merged,
      '--scale-mode', 'paper_eq2',
    ]);

    const result = JSON.parse(fs.readFileSync(merged, 'utf-8')) as number[][];
    expect(result).toHaveLength(payload.d);
    expect(result[0]).toHaveLength(payload.k);
    // a zero base weight makes the merge equal A.B; cross-check a few entries
    for (const [i, j] of [[0, 0], [1, 3], [payload.d - 1, payload.k - 1]] as const) {
      let expected = 0;
      for (let t = 0; t < payload.r; t++) {
        expected += payload.a[i * payload.r + t] * payload.b[t * payload.k + j];
      }
      expect(result[i][j]).toBeCloseTo(expected, 5);
    }
  });
});
