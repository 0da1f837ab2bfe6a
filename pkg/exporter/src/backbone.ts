/**
 * Pluggable feature backbones.
 *
 * Real pretrained encoders plug in behind the Backbone interface; the
 * built-in "local-stats" backbone is deterministic and dependency-free,
 * projecting per-patch and per-pixel color/gradient statistics through a
 * seeded random matrix. It exists so the downstream grouping stack can be
 * exercised end to end without model weights.
 */

import { FloatImage } from "./image.js";
import { Tensor, tensor } from "./tensorfile.js";

export interface BackboneOutput {
  /** token features, channels x gridH x gridW */
  fLr: Tensor;
  /** pixel query embeddings, dQk x targetH x targetW */
  queries: Tensor;
  /** token key embeddings, dQk x gridH x gridW */
  keys: Tensor;
}

export interface Backbone {
  readonly name: string;
  readonly patchSize: number;
  readonly channels: number;
  readonly dQk: number;
  /** hrScale divides the image resolution to form the query grid */
  forward(img: FloatImage, hrScale: number): BackboneOutput;
}

const M64 = (1n << 64n) - 1n;

function splitmix64(x: bigint): bigint {
  x = (x + 0x9e3779b97f4a7c15n) & M64;
  let z = x;
  z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & M64;
  z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & M64;
  return (z ^ (z >> 31n)) & M64;
}

/** Deterministic uniform values in [-scale, scale] from a seeded counter. */
function seededMatrix(rows: number, cols: number, seed: number, scale = 0.5): Float32Array {
  const out = new Float32Array(rows * cols);
  let state = splitmix64(BigInt(seed));
  for (let i = 0; i < out.length; i++) {
    state = splitmix64(state);
    const unit = Number(state >> 11n) / 2 ** 53; // [0, 1)
    out[i] = (2 * unit - 1) * scale;
  }
  return out;
}

const RAW_DIM = 9; // r, g, b means + r, g, b spreads + gradient energy + y, x
const CONTENT_DIM = 7; // the position-free prefix, used for token features

function rawPatchFeature(
  img: FloatImage,
  y0: number,
  x0: number,
  h: number,
  w: number,
  out: Float64Array
): void {
  const n = img.width * img.height;
  const count = h * w;
  out.fill(0);
  for (let c = 0; c < 3; c++) {
    let sum = 0;
    let sumSq = 0;
    for (let y = y0; y < y0 + h; y++) {
      for (let x = x0; x < x0 + w; x++) {
        const v = img.planes[c * n + y * img.width + x];
        sum += v;
        sumSq += v * v;
      }
    }
    const mean = sum / count;
    out[c] = mean;
    out[3 + c] = Math.sqrt(Math.max(0, sumSq / count - mean * mean));
  }
  // gradient energy: mean absolute forward difference of the green plane
  let grad = 0;
  for (let y = y0; y < y0 + h; y++) {
    for (let x = x0; x < x0 + w; x++) {
      const here = img.planes[n + y * img.width + x];
      const right = x + 1 < img.width ? img.planes[n + y * img.width + x + 1] : here;
      const down = y + 1 < img.height ? img.planes[n + (y + 1) * img.width + x] : here;
      grad += Math.abs(right - here) + Math.abs(down - here);
    }
  }
  out[6] = grad / count;
  out[7] = (y0 + h / 2) / img.height;
  out[8] = (x0 + w / 2) / img.width;
}

function project(raw: Float64Array, mat: Float32Array, rows: number, cols: number): Float64Array {
  const out = new Float64Array(rows);
  for (let r = 0; r < rows; r++) {
    let acc = 0;
    for (let c = 0; c < cols; c++) acc += mat[r * cols + c] * raw[c];
    out[r] = acc;
  }
  return out;
}

export interface LocalBackboneOptions {
  patchSize?: number;
  channels?: number;
  dQk?: number;
  seed?: number;
  /** peak attention logit between a unit query and unit key */
  sharpness?: number;
}

export function localBackbone(opts: LocalBackboneOptions = {}): Backbone {
  const patchSize = opts.patchSize ?? 16;
  const channels = opts.channels ?? 32;
  const dQk = opts.dQk ?? 16;
  const seed = opts.seed ?? 0;
  const sharpness = opts.sharpness ?? 24;
  // token features see only content statistics; queries/keys also see position
  const featProj = seededMatrix(channels, CONTENT_DIM, seed * 3 + 1);
  const qkProj = seededMatrix(dQk, RAW_DIM, seed * 3 + 2);
  // downstream attention divides q.k by sqrt(dQk); unit-normalized embeddings
  // scaled by s give logits s^2 cos / sqrt(dQk), so s^2 = sharpness sqrt(dQk)
  const qkScale = Math.sqrt(sharpness * Math.sqrt(dQk));

  const scaled = (v: Float64Array): Float64Array => {
    let norm = 0;
    for (const x of v) norm += x * x;
    norm = Math.sqrt(norm);
    if (norm === 0) return v;
    for (let i = 0; i < v.length; i++) v[i] = (v[i] / norm) * qkScale;
    return v;
  };
  return {
    name: `local-stats-c${channels}`,
    patchSize,
    channels,
    dQk,
    forward(img: FloatImage, hrScale: number): BackboneOutput {
      const gridW = Math.floor(img.width / patchSize);
      const gridH = Math.floor(img.height / patchSize);
      if (gridW < 1 || gridH < 1) {
        throw new Error(`image ${img.width}x${img.height} smaller than one ${patchSize}px patch`);
      }
      const raw = new Float64Array(RAW_DIM);
      const fLr = new Float32Array(channels * gridH * gridW);
      const keys = new Float32Array(dQk * gridH * gridW);
      const nTok = gridH * gridW;
      for (let gy = 0; gy < gridH; gy++) {
        for (let gx = 0; gx < gridW; gx++) {
          rawPatchFeature(img, gy * patchSize, gx * patchSize, patchSize, patchSize, raw);
          const feat = project(raw, featProj, channels, CONTENT_DIM);
          const key = scaled(project(raw, qkProj, dQk, RAW_DIM));
          const tok = gy * gridW + gx;
          for (let c = 0; c < channels; c++) fLr[c * nTok + tok] = feat[c];
          for (let c = 0; c < dQk; c++) keys[c * nTok + tok] = key[c];
        }
      }
      const qW = Math.max(1, Math.floor(img.width / hrScale));
      const qH = Math.max(1, Math.floor(img.height / hrScale));
      const queries = new Float32Array(dQk * qH * qW);
      const nQ = qH * qW;
      const cellH = img.height / qH;
      const cellW = img.width / qW;
      for (let qy = 0; qy < qH; qy++) {
        for (let qx = 0; qx < qW; qx++) {
          const y0 = Math.min(img.height - 1, Math.floor(qy * cellH));
          const x0 = Math.min(img.width - 1, Math.floor(qx * cellW));
          const h = Math.max(1, Math.min(img.height - y0, Math.ceil(cellH)));
          const w = Math.max(1, Math.min(img.width - x0, Math.ceil(cellW)));
          rawPatchFeature(img, y0, x0, h, w, raw);
          const q = scaled(project(raw, qkProj, dQk, RAW_DIM));
          const px = qy * qW + qx;
          for (let c = 0; c < dQk; c++) queries[c * nQ + px] = q[c];
        }
      }
      return {
        fLr: tensor("f32", [channels, gridH, gridW], fLr),
        queries: tensor("f32", [dQk, qH, qW], queries),
        keys: tensor("f32", [dQk, gridH, gridW], keys),
      };
    },
  };
}
