/**
 * Bundle writers: backbone features per image, ground-truth label maps
 * from annotation masks. Output manifests use `name=file:dims` lines for
 * tensors plus `# key=value` comment lines for provenance, matching what
 * the Python loader expects.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { Backbone } from "./backbone.js";
import { decodeImage, decodeIndexMask, resizeLongestSide } from "./image.js";
import { Tensor, tensor, writeTensor } from "./tensorfile.js";

export interface ExportManifest {
  imageId: string;
  backbone: string;
  patchSize: number;
  tensors: Record<string, { file: string; dims: number[] }>;
}

export interface ExportImageOptions {
  longestSide?: number; // resize target, aspect preserved
  hrScale?: number; // query grid = image resolution / hrScale
}

export function exportImage(
  imagePath: string,
  backbone: Backbone,
  outDir: string,
  opts: ExportImageOptions = {}
): ExportManifest {
  const longest = opts.longestSide ?? 640;
  const hrScale = opts.hrScale ?? 4;
  const img = resizeLongestSide(decodeImage(imagePath), longest);
  const out = backbone.forward(img, hrScale);

  const imageId = path.basename(imagePath).replace(/\.[^.]+$/, "");
  const bundleDir = path.join(outDir, imageId);
  fs.mkdirSync(bundleDir, { recursive: true });

  const manifest: ExportManifest = {
    imageId,
    backbone: backbone.name,
    patchSize: backbone.patchSize,
    tensors: {},
  };
  const entries: Array<[string, Tensor]> = [
    ["f_lr", out.fLr],
    ["queries", out.queries],
    ["keys", out.keys],
  ];
  const lines = [
    `# image=${imageId}`,
    `# backbone=${backbone.name}`,
    `# patch=${backbone.patchSize}`,
    `# resized=${img.width}x${img.height}`,
  ];
  for (const [name, t] of entries) {
    const file = `${name}.tns`;
    writeTensor(path.join(bundleDir, file), t);
    manifest.tensors[name] = { file, dims: t.dims };
    lines.push(`${name}=${file}:${t.dims.join("x")}`);
  }
  fs.writeFileSync(path.join(bundleDir, "manifest.txt"), lines.join("\n") + "\n");
  return manifest;
}

export interface ExportGtOptions {
  /** class remap table, source index -> exported label */
  remap?: Record<number, number>;
  /** annotation value treated as ignore; becomes label 0 */
  ignoreIndex?: number;
}

export function exportGt(maskPath: string, outDir: string, opts: ExportGtOptions = {}): string {
  const ignoreIndex = opts.ignoreIndex ?? 255;
  const { width, height, indices } = decodeIndexMask(maskPath);
  const labels = new Uint32Array(indices.length);
  for (let i = 0; i < indices.length; i++) {
    const v = indices[i];
    if (v === ignoreIndex) {
      labels[i] = 0;
    } else if (opts.remap && v in opts.remap) {
      labels[i] = opts.remap[v];
    } else {
      labels[i] = v;
    }
  }
  fs.mkdirSync(outDir, { recursive: true });
  const imageId = path.basename(maskPath).replace(/\.[^.]+$/, "");
  const outPath = path.join(outDir, `${imageId}.tns`);
  writeTensor(outPath, tensor("u32", [height, width], labels));
  return outPath;
}
