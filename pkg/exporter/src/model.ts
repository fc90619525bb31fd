/**
 * Encoder bundles: a directory holding a bundle.json plus TF.js layers
 * models for the image and text towers. The bundle path doubles as the
 * model identifier recorded in export reports; there is no default model.
 *
 * bundle.json:
 *   {
 *     "name": "...",
 *     "feature_dim": 512,
 *     "image": { "model": "image/model.json", "input_size": 224,
 *                "mean": [r,g,b], "std": [r,g,b] },
 *     "text":  { "model": "text/model.json", "vocab_size": 4096 }
 *   }
 */
import * as crypto from 'node:crypto';
import * as fs from 'node:fs';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';
import type { Pixels } from './images.js';

export interface BundleSpec {
  name: string;
  feature_dim: number;
  image: { model: string; input_size: number; mean: number[]; std: number[] };
  text: { model: string; vocab_size: number };
}

export class EncoderBundle {
  private constructor(
    readonly dir: string,
    readonly spec: BundleSpec,
    private readonly imageModel: tf.LayersModel,
    private readonly textModel: tf.LayersModel,
  ) {}

  static async load(dir: string): Promise<EncoderBundle> {
    const bundlePath = path.join(dir, 'bundle.json');
    if (!fs.existsSync(bundlePath)) {
      throw new Error(`model bundle not found: ${bundlePath}`);
    }
    const spec = JSON.parse(fs.readFileSync(bundlePath, 'utf8')) as BundleSpec;
    for (const key of ['name', 'feature_dim', 'image', 'text'] as const) {
      if (!(key in spec)) {
        throw new Error(`${bundlePath}: missing key ${key}`);
      }
    }
    await tf.setBackend('cpu');
    const imageModel = await loadLayersModelFromFile(path.join(dir, spec.image.model));
    const textModel = await loadLayersModelFromFile(path.join(dir, spec.text.model));
    return new EncoderBundle(dir, spec, imageModel, textModel);
  }

  get featureDim(): number {
    return this.spec.feature_dim;
  }

  /** Hash of every preprocessing choice that affects the features. */
  preprocessingHash(): string {
    const { input_size, mean, std } = this.spec.image;
    const canonical = JSON.stringify({
      input_size,
      mean,
      std,
      resize: 'bilinear',
      scale: '1/255',
      text: { tokenizer: 'whitespace-lower-fnv1a', vocab_size: this.spec.text.vocab_size },
    });
    return crypto.createHash('sha256').update(canonical).digest('hex');
  }

  /** Decode -> resize -> normalize -> image tower -> L2 norm. */
  encodeImage(pixels: Pixels): Float32Array {
    const { input_size, mean, std } = this.spec.image;
    const out = tf.tidy(() => {
      const rgba = tf.tensor3d(pixels.data, [pixels.height, pixels.width, 4], 'int32');
      const rgb = rgba.slice([0, 0, 0], [pixels.height, pixels.width, 3]).toFloat().div(255);
      const resized = tf.image.resizeBilinear(rgb as tf.Tensor3D, [input_size, input_size]);
      const normalized = resized.sub(tf.tensor1d(mean)).div(tf.tensor1d(std));
      const feature = this.imageModel.predict(normalized.expandDims(0)) as tf.Tensor;
      return l2Normalize(feature.reshape([this.featureDim]));
    });
    const data = out.dataSync() as Float32Array;
    out.dispose();
    return Float32Array.from(data);
  }

  /** Hashing bag-of-words -> text tower -> L2 norm. */
  encodeText(text: string): Float32Array {
    const counts = new Float32Array(this.spec.text.vocab_size);
    for (const token of text.toLowerCase().split(/\s+/).filter(Boolean)) {
      counts[fnv1a(token) % this.spec.text.vocab_size] += 1;
    }
    const out = tf.tidy(() => {
      const feature = this.textModel.predict(tf.tensor2d(counts, [1, counts.length])) as tf.Tensor;
      return l2Normalize(feature.reshape([this.featureDim]));
    });
    const data = out.dataSync() as Float32Array;
    out.dispose();
    return Float32Array.from(data);
  }
}

function l2Normalize(t: tf.Tensor): tf.Tensor {
  const norm = t.norm();
  return t.div(norm.maximum(tf.scalar(1e-12)));
}

export function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

async function loadLayersModelFromFile(modelJsonPath: string): Promise<tf.LayersModel> {
  if (!fs.existsSync(modelJsonPath)) {
    throw new Error(`model file not found: ${modelJsonPath}`);
  }
  const dir = path.dirname(modelJsonPath);
  const modelJson = JSON.parse(fs.readFileSync(modelJsonPath, 'utf8'));
  const manifest = modelJson.weightsManifest as Array<{
    paths: string[];
    weights: tf.io.WeightsManifestEntry[];
  }>;
  const weightSpecs: tf.io.WeightsManifestEntry[] = [];
  const buffers: Buffer[] = [];
  for (const group of manifest) {
    weightSpecs.push(...group.weights);
    for (const p of group.paths) {
      buffers.push(fs.readFileSync(path.join(dir, p)));
    }
  }
  const joined = Buffer.concat(buffers);
  const weightData = joined.buffer.slice(joined.byteOffset, joined.byteOffset + joined.byteLength);
  return tf.loadLayersModel(
    tf.io.fromMemory({ modelTopology: modelJson.modelTopology, weightSpecs, weightData }),
  );
}

/** Persist a layers model as model.json + weights.bin under `dir`. */
export async function saveLayersModelToDir(model: tf.LayersModel, dir: string): Promise<void> {
  fs.mkdirSync(dir, { recursive: true });
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const weightData = tf.io.CompositeArrayBuffer.join(artifacts.weightData);
      fs.writeFileSync(path.join(dir, 'weights.bin'), Buffer.from(weightData));
      const modelJson = {
        modelTopology: artifacts.modelTopology,
        weightsManifest: [{ paths: ['weights.bin'], weights: artifacts.weightSpecs }],
      };
      fs.writeFileSync(path.join(dir, 'model.json'), JSON.stringify(modelJson));
      return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: 'JSON' } };
    }),
  );
}
