/** Patch image decoding: PNG and JPEG to RGBA pixel buffers. */
import * as fs from 'node:fs';
import * as path from 'node:path';
import { PNG } from 'pngjs';
import jpeg from 'jpeg-js';

export interface Pixels {
  width: number;
  height: number;
  /** RGBA, 8 bit per channel */
  data: Uint8Array;
}

export const IMAGE_EXTENSIONS = new Set(['.png', '.jpg', '.jpeg']);

export function isImageFile(file: string): boolean {
  return IMAGE_EXTENSIONS.has(path.extname(file).toLowerCase());
}

export function decodeImage(filePath: string): Pixels {
  const raw = fs.readFileSync(filePath);
  const ext = path.extname(filePath).toLowerCase();
  if (ext === '.png') {
    const png = PNG.sync.read(raw);
    return { width: png.width, height: png.height, data: new Uint8Array(png.data) };
  }
  if (ext === '.jpg' || ext === '.jpeg') {
    const out = jpeg.decode(raw, { useTArray: true, formatAsRGBA: true });
    return { width: out.width, height: out.height, data: new Uint8Array(out.data) };
  }
  throw new Error(`unsupported image format: ${filePath}`);
}
