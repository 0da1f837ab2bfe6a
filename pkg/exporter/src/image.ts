/**
 * Image decoding (PNG via pngjs, PPM/PGM parsed directly) and bilinear
 * resizing to a fixed longest side with the aspect ratio preserved.
 */

import * as fs from "node:fs";
import { PNG } from "pngjs";

export interface FloatImage {
  width: number;
  height: number;
  /** planar RGB in [0, 1], length 3 * width * height (R plane, G plane, B plane) */
  planes: Float32Array;
}

export function decodeImage(path: string): FloatImage {
  if (path.endsWith(".ppm") || path.endsWith(".pgm")) return decodePnm(fs.readFileSync(path));
  return decodePng(fs.readFileSync(path));
}

export function decodePng(buf: Buffer): FloatImage {
  const png = PNG.sync.read(buf);
  const { width, height, data } = png;
  const planes = new Float32Array(3 * width * height);
  const n = width * height;
  for (let i = 0; i < n; i++) {
    planes[i] = data[4 * i] / 255;
    planes[n + i] = data[4 * i + 1] / 255;
    planes[2 * n + i] = data[4 * i + 2] / 255;
  }
  return { width, height, planes };
}

/** Binary PPM (P6) and PGM (P5), 8-bit maxval. */
export function decodePnm(buf: Buffer): FloatImage {
  const header = buf.toString("ascii", 0, Math.min(buf.length, 128));
  const magic = header.slice(0, 2);
  if (magic !== "P6" && magic !== "P5") throw new Error(`unsupported PNM magic ${magic}`);
  const fields: number[] = [];
  let pos = 2;
  while (fields.length < 3) {
    while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++;
    if (buf[pos] === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++;
    fields.push(parseInt(buf.toString("ascii", start, pos), 10));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval > 255) throw new Error("16-bit PNM not supported");
  const n = width * height;
  const planes = new Float32Array(3 * n);
  if (magic === "P6") {
    for (let i = 0; i < n; i++) {
      planes[i] = buf[pos + 3 * i] / maxval;
      planes[n + i] = buf[pos + 3 * i + 1] / maxval;
      planes[2 * n + i] = buf[pos + 3 * i + 2] / maxval;
    }
  } else {
    for (let i = 0; i < n; i++) {
      const v = buf[pos + i] / maxval;
      planes[i] = v;
      planes[n + i] = v;
      planes[2 * n + i] = v;
    }
  }
  return { width, height, planes };
}

/** Scale so the longest side equals `longest` (up or down), bilinear. */
export function resizeLongestSide(img: FloatImage, longest: number): FloatImage {
  const scale = longest / Math.max(img.width, img.height);
  const outW = Math.max(1, Math.round(img.width * scale));
  const outH = Math.max(1, Math.round(img.height * scale));
  if (outW === img.width && outH === img.height) return img;
  const planes = new Float32Array(3 * outW * outH);
  const nIn = img.width * img.height;
  const nOut = outW * outH;
  for (let y = 0; y < outH; y++) {
    const sy = ((y + 0.5) * img.height) / outH - 0.5;
    const y0 = Math.max(0, Math.floor(sy));
    const y1 = Math.min(img.height - 1, y0 + 1);
    const fy = Math.min(1, Math.max(0, sy - y0));
    for (let x = 0; x < outW; x++) {
      const sx = ((x + 0.5) * img.width) / outW - 0.5;
      const x0 = Math.max(0, Math.floor(sx));
      const x1 = Math.min(img.width - 1, x0 + 1);
      const fx = Math.min(1, Math.max(0, sx - x0));
      for (let c = 0; c < 3; c++) {
        const p = img.planes;
        const base = c * nIn;
        const v =
          p[base + y0 * img.width + x0] * (1 - fy) * (1 - fx) +
          p[base + y0 * img.width + x1] * (1 - fy) * fx +
          p[base + y1 * img.width + x0] * fy * (1 - fx) +
          p[base + y1 * img.width + x1] * fy * fx;
        planes[c * nOut + y * outW + x] = v;
      }
    }
  }
  return { width: outW, height: outH, planes };
}

/** 8-bit single-channel index mask (R channel must equal G and B). */
export function decodeIndexMask(path: string): { width: number; height: number; indices: Uint32Array } {
  const buf = fs.readFileSync(path);
  if (path.endsWith(".pgm")) {
    const img = decodePnm(buf);
    const n = img.width * img.height;
    const indices = new Uint32Array(n);
    for (let i = 0; i < n; i++) indices[i] = Math.round(img.planes[i] * 255);
    return { width: img.width, height: img.height, indices };
  }
  const png = PNG.sync.read(buf);
  const n = png.width * png.height;
  const indices = new Uint32Array(n);
  for (let i = 0; i < n; i++) {
    const r = png.data[4 * i];
    if (png.data[4 * i + 1] !== r || png.data[4 * i + 2] !== r) {
      throw new Error("mask is not a grayscale index image; provide class indices, not colors");
    }
    indices[i] = r;
  }
  return { width: png.width, height: png.height, indices };
}
