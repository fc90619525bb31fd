/**
 * Build the tiny deterministic encoder bundle used by the test suite:
 * an image tower (flatten -> dense) and a text tower (dense over a hashed
 * bag-of-words), with seeded weights so every run produces identical bytes.
 */
import * as fs from 'node:fs';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';
import { saveLayersModelToDir } from '../src/model.js';

const INPUT_SIZE = 16;
const FEATURE_DIM = 8;
const VOCAB_SIZE = 64;

/** mulberry32: small deterministic PRNG */
function rng(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function seededKernel(rand: () => number, rows: number, cols: number): tf.Tensor2D {
  const data = new Float32Array(rows * cols);
  for (let i = 0; i < data.length; i++) {
    data[i] = (rand() - 0.5) * 0.2;
  }
  return tf.tensor2d(data, [rows, cols]);
}

async function build(outDir: string): Promise<void> {
  await tf.setBackend('cpu');

  const image = tf.sequential({
    layers: [
      tf.layers.flatten({ inputShape: [INPUT_SIZE, INPUT_SIZE, 3] }),
      tf.layers.dense({ units: FEATURE_DIM, useBias: false }),
    ],
  });
  image.setWeights([seededKernel(rng(1234), INPUT_SIZE * INPUT_SIZE * 3, FEATURE_DIM)]);

  const text = tf.sequential({
    layers: [tf.layers.dense({ units: FEATURE_DIM, useBias: false, inputShape: [VOCAB_SIZE] })],
  });
  text.setWeights([seededKernel(rng(5678), VOCAB_SIZE, FEATURE_DIM)]);

  await saveLayersModelToDir(image, path.join(outDir, 'image'));
  await saveLayersModelToDir(text, path.join(outDir, 'text'));
  fs.writeFileSync(
    path.join(outDir, 'bundle.json'),
    JSON.stringify(
      {
        name: 'test-dual-encoder-v1',
        feature_dim: FEATURE_DIM,
        image: {
          model: 'image/model.json',
          input_size: INPUT_SIZE,
          mean: [0.48145466, 0.4578275, 0.40821073],
          std: [0.26862954, 0.26130258, 0.27577711],
        },
        text: { model: 'text/model.json', vocab_size: VOCAB_SIZE },
      },
      null,
      2,
    ),
  );
  console.log(`wrote test encoder bundle to ${outDir}`);
}

const outDir = process.argv[2];
if (!outDir) {
  console.error('usage: make-test-model <out-dir>');
  process.exit(2);
}
fs.mkdirSync(outDir, { recursive: true });
build(outDir).catch((err) => {
  console.error(err);
  process.exit(1);
});
