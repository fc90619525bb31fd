/**
 * Export operations: patch folders to an embedding archive, and prompt
 * description files to fixed text features. Only fixed text is encoded;
 * learnable prompt optimization lives entirely in the training pipeline.
 */
import * as fs from 'node:fs';
import * as path from 'node:path';
import { atomicWrite, writeArchive, type ArchiveBag, type Manifest } from './archive.js';
import { decodeImage, isImageFile } from './images.js';
import { EncoderBundle } from './model.js';
import { parseDescriptionFile } from './prompts.js';

export interface BagFolder {
  folder: string;
  label: number;
  /** explicit patch file list; defaults to a sorted folder scan */
  patches?: string[];
}

export interface ExportManifest {
  bags: BagFolder[];
}

export interface SkippedPatch {
  file: string;
  reason: string;
}

export interface ExportReport {
  model: string;
  model_name: string;
  preprocessing_hash: string;
  feature_dim: number;
  bag_count: number;
  instance_count: number;
  skipped: SkippedPatch[];
}

export function readExportManifest(manifestPath: string): ExportManifest {
  const data = JSON.parse(fs.readFileSync(manifestPath, 'utf8')) as ExportManifest;
  if (!Array.isArray(data.bags) || data.bags.length === 0) {
    throw new Error(`${manifestPath}: "bags" must be a non-empty array`);
  }
  data.bags.forEach((bag, i) => {
    if (typeof bag.folder !== 'string' || !fs.existsSync(bag.folder)) {
      throw new Error(`${manifestPath}: bags[${i}].folder does not exist: ${bag.folder}`);
    }
    if (!Number.isInteger(bag.label) || bag.label < 0 || bag.label > 255) {
      throw new Error(`${manifestPath}: bags[${i}].label must be an integer in [0, 255]`);
    }
    if (bag.patches) {
      for (const p of bag.patches) {
        if (!fs.existsSync(path.join(bag.folder, p))) {
          throw new Error(`${manifestPath}: bags[${i}] lists a missing patch: ${p}`);
        }
      }
    }
  });
  return data;
}

function patchFiles(bag: BagFolder): string[] {
  if (bag.patches) {
    return bag.patches.map((p) => path.join(bag.folder, p));
  }
  return fs
    .readdirSync(bag.folder)
    .filter(isImageFile)
    .sort()
    .map((f) => path.join(bag.folder, f));
}

export async function exportInstances(
  manifestFile: string,
  modelDir: string,
  outPath: string,
  log: (msg: string) => void = console.error,
): Promise<{ manifest: Manifest; report: ExportReport }> {
  const manifest = readExportManifest(manifestFile);
  const bundle = await EncoderBundle.load(modelDir);
  const skipped: SkippedPatch[] = [];
  const bags: ArchiveBag[] = [];

  for (const bag of manifest.bags) {
    const files = patchFiles(bag);
    const rows: Float32Array[] = [];
    for (const file of files) {
      try {
        rows.push(bundle.encodeImage(decodeImage(file)));
      } catch (err) {
        const reason = err instanceof Error ? err.message : String(err);
        skipped.push({ file, reason });
        log(`warning: skipping unreadable patch ${file}: ${reason}`);
      }
    }
    if (rows.length === 0) {
      throw new Error(`bag ${bag.folder} has no readable patches`);
    }
    const features = new Float32Array(rows.length * bundle.featureDim);
    rows.forEach((row, i) => features.set(row, i * bundle.featureDim));
    bags.push({ features, count: rows.length, label: bag.label, source: bag.folder });
  }

  const archiveManifest = writeArchive(outPath, bundle.featureDim, bags);
  const report: ExportReport = {
    model: path.resolve(modelDir),
    model_name: bundle.spec.name,
    preprocessing_hash: bundle.preprocessingHash(),
    feature_dim: bundle.featureDim,
    bag_count: bags.length,
    instance_count: bags.reduce((acc, b) => acc + b.count, 0),
    skipped,
  };
  atomicWrite(`${outPath}.export.json`, Buffer.from(JSON.stringify(report, null, 2)));
  return { manifest: archiveManifest, report };
}

export interface TextFeature {
  tag: string;
  level: string;
  polarity: string | null;
  source: string;
  feature: number[];
}

export async function exportTextFeatures(
  promptDir: string,
  modelDir: string,
  outPath: string,
): Promise<TextFeature[]> {
  const files = fs
    .readdirSync(promptDir)
    .filter((f) => f.endsWith('.txt'))
    .sort()
    .map((f) => path.join(promptDir, f));
  if (files.length === 0) {
    throw new Error(`no description files (*.txt) in ${promptDir}`);
  }
  const bundle = await EncoderBundle.load(modelDir);
  const features = files.map((file) => {
    const spec = parseDescriptionFile(file);
    const text = [spec.template.replace('[CLASS]', spec.tag), spec.description]
      .filter(Boolean)
      .join(' ');
    return {
      tag: spec.tag,
      level: spec.level,
      polarity: spec.polarity,
      source: file,
      feature: Array.from(bundle.encodeText(text)),
    };
  });
  atomicWrite(
    outPath,
    Buffer.from(
      JSON.stringify(
        { model: path.resolve(modelDir), preprocessing_hash: bundle.preprocessingHash(), features },
        null,
        2,
      ),
    ),
  );
  return features;
}
