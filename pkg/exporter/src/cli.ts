#!/usr/bin/env node
/**
 * ease-export export-image --image <file> --out <dir>
 *     [--patch 16] [--channels 32] [--dqk 16] [--seed 0]
 *     [--longest-side 640] [--hr-scale 4]
 * ease-export export-gt --mask <file> --out <dir>
 *     [--remap table.json] [--ignore-index 255]
 */

import * as fs from "node:fs";

import { localBackbone } from "./backbone.js";
import { exportGt, exportImage } from "./export.js";

function parseFlags(argv: string[]): Record<string, string> {
  const flags: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new UsageError(`expected --flag value pairs, got ${argv[i]}`);
    }
    flags[argv[i].slice(2)] = argv[i + 1];
  }
  return flags;
}

class UsageError extends Error {}

function need(flags: Record<string, string>, name: string): string {
  const v = flags[name];
  if (!v) throw new UsageError(`--${name} is required`);
  return v;
}

function num(flags: Record<string, string>, name: string, dflt: number): number {
  const v = flags[name];
  if (v === undefined) return dflt;
  const parsed = Number(v);
  if (!Number.isFinite(parsed)) throw new UsageError(`--${name} must be a number`);
  return parsed;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "export-image") {
      const flags = parseFlags(rest);
      const backbone = localBackbone({
        patchSize: num(flags, "patch", 16),
        channels: num(flags, "channels", 32),
        dQk: num(flags, "dqk", 16),
        seed: num(flags, "seed", 0),
      });
      const manifest = exportImage(need(flags, "image"), backbone, need(flags, "out"), {
        longestSide: num(flags, "longest-side", 640),
        hrScale: num(flags, "hr-scale", 4),
      });
      const grid = manifest.tensors["f_lr"].dims;
      console.log(`${manifest.imageId}: token grid ${grid[2]}x${grid[1]}, C=${grid[0]}`);
      return 0;
    }
    if (command === "export-gt") {
      const flags = parseFlags(rest);
      let remap: Record<number, number> | undefined;
      if (flags["remap"]) {
        remap = JSON.parse(fs.readFileSync(flags["remap"], "utf8"));
      }
      const out = exportGt(need(flags, "mask"), need(flags, "out"), {
        remap,
        ignoreIndex: num(flags, "ignore-index", 255),
      });
      console.log(out);
      return 0;
    }
    throw new UsageError(`unknown command ${command ?? "(none)"}; use export-image or export-gt`);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`);
      return 1;
    }
    const anyErr = err as NodeJS.ErrnoException;
    if (anyErr && anyErr.code === "ENOENT") {
      console.error(`io error: ${anyErr.message}`);
      return 2;
    }
    console.error(`error: ${anyErr?.message ?? String(err)}`);
    return 3;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === `file://${process.argv[1]}`;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
