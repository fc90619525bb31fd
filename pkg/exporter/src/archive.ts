/**
 * Binary embedding archive writer/reader, byte-compatible with the training
 * pipeline's loader.
 *
 * Layout (little-endian):
 *   magic   8 bytes  "TOPEMB1\0"
 *   m       u32      feature dimension
 *   count   u32      number of bags
 *   per bag: n_i u32, label u8, has_instance_labels u8,
 *            [n_i x u8 labels], n_i*m x f32 features
 *
 * A JSON manifest sidecar (<archive>.manifest.json) records one entry per
 * bag with the byte offset of its record.
 */
import * as fs from 'node:fs';
import * as path from 'node:path';

export const MAGIC = Buffer.from('TOPEMB1\0', 'latin1');
const HEADER_SIZE = 16;
const BAG_HEADER_SIZE = 6;

export interface ArchiveBag {
  /** n_i rows of m float32 features, row-major */
  features: Float32Array;
  count: number;
  label: number;
  instanceLabels?: Uint8Array;
  source: string;
}

export interface ManifestEntry {
  bag_id: number;
  label: number;
  n_i: number;
  byte_offset: number;
  source: string;
}

export interface Manifest {
  m: number;
  bag_count: number;
  bags: ManifestEntry[];
}

export function manifestPath(archivePath: string): string {
  return `${archivePath}.manifest.json`;
}

export function writeArchive(archivePath: string, m: number, bags: ArchiveBag[]): Manifest {
  if (bags.length === 0) {
    throw new Error('refusing to write an archive with no bags');
  }
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(HEADER_SIZE);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(m, 8);
  header.writeUInt32LE(bags.length, 12);
  chunks.push(header);

  let offset = HEADER_SIZE;
  const entries: ManifestEntry[] = [];
  bags.forEach((bag, i) => {
    if (bag.count < 1) {
      throw new Error(`bag ${i} (${bag.source}) is empty`);
    }
    if (bag.features.length !== bag.count * m) {
      throw new Error(
        `bag ${i} (${bag.source}): ${bag.features.length} floats != n_i*m = ${bag.count * m}`,
      );
    }
    const hasLabels = bag.instanceLabels !== undefined;
    if (hasLabels && bag.instanceLabels!.length !== bag.count) {
      throw new Error(`bag ${i}: instance label count mismatch`);
    }
    const bagHeader = Buffer.alloc(BAG_HEADER_SIZE);
    bagHeader.writeUInt32LE(bag.count, 0);
    bagHeader.writeUInt8(bag.label, 4);
    bagHeader.writeUInt8(hasLabels ? 1 : 0, 5);
    const parts = [bagHeader];
    if (hasLabels) {
      parts.push(Buffer.from(bag.instanceLabels!));
    }
    const feats = Buffer.alloc(4 * bag.features.length);
    for (let j = 0; j < bag.features.length; j++) {
      feats.writeFloatLE(bag.features[j], 4 * j);
    }
    parts.push(feats);
    entries.push({ bag_id: i, label: bag.label, n_i: bag.count, byte_offset: offset, source: bag.source });
    const record = Buffer.concat(parts);
    chunks.push(record);
    offset += record.length;
  });

  const manifest: Manifest = { m, bag_count: bags.length, bags: entries };
  atomicWrite(archivePath, Buffer.concat(chunks));
  atomicWrite(manifestPath(archivePath), Buffer.from(JSON.stringify(manifest, null, 2)));
  return manifest;
}

/** Parse an archive back; used by tests to cross-check the binary layout. */
export function readArchive(archivePath: string): { m: number; bags: ArchiveBag[]; offsets: number[] } {
  const data = fs.readFileSync(archivePath);
  if (data.length < HEADER_SIZE || !data.subarray(0, 8).equals(MAGIC)) {
    throw new Error(`${archivePath}: bad magic`);
  }
  const m = data.readUInt32LE(8);
  const count = data.readUInt32LE(12);
  const bags: ArchiveBag[] = [];
  const offsets: number[] = [];
  let offset = HEADER_SIZE;
  for (let i = 0; i < count; i++) {
    offsets.push(offset);
    const n = data.readUInt32LE(offset);
    const label = data.readUInt8(offset + 4);
    const hasLabels = data.readUInt8(offset + 5);
    offset += BAG_HEADER_SIZE;
    let instanceLabels: Uint8Array | undefined;
    if (hasLabels === 1) {
      instanceLabels = new Uint8Array(data.subarray(offset, offset + n));
      offset += n;
    }
    const features = new Float32Array(n * m);
    for (let j = 0; j < features.length; j++) {
      features[j] = data.readFloatLE(offset + 4 * j);
    }
    offset += 4 * n * m;
    bags.push({ features, count: n, label, instanceLabels, source: `bag-${i}` });
  }
  if (offset !== data.length) {
    throw new Error(`${archivePath}: ${data.length - offset} trailing bytes`);
  }
  return { m, bags, offsets };
}

export function atomicWrite(filePath: string, data: Buffer): void {
  fs.mkdirSync(path.dirname(filePath), { recursive: true });
  const tmp = `${filePath}.tmp-${process.pid}-${Date.now()}`;
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, filePath);
}
