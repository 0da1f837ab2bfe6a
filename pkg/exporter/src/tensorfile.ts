/**
 * Bit-exact little-endian tensor container shared with the Python side.
 *
 * Layout: 8-byte magic "EASETNSR", u32 version (1), u32 dtype code
 * (0 = float32, 1 = uint32), u32 ndim, ndim x u64 dims, row-major payload.
 */

import * as fs from "node:fs";

export const MAGIC = "EASETNSR";
export const FORMAT_VERSION = 1;

export type Dtype = "f32" | "u32";

export interface Tensor {
  dtype: Dtype;
  dims: number[];
  data: Float32Array | Uint32Array;
}

export class TensorFileError extends Error {}
export class BadMagicError extends TensorFileError {}
export class DtypeMismatchError extends TensorFileError {}
export class TruncatedPayloadError extends TensorFileError {}

const DTYPE_CODE: Record<Dtype, number> = { f32: 0, u32: 1 };

export function tensor(dtype: Dtype, dims: number[], data: Float32Array | Uint32Array): Tensor {
  const count = dims.reduce((a, b) => a * b, 1);
  if (data.length !== count) {
    throw new DtypeMismatchError(`payload has ${data.length} values for dims ${dims.join("x")}`);
  }
  if (dtype === "f32" && !(data instanceof Float32Array)) {
    throw new DtypeMismatchError("f32 tensor needs a Float32Array");
  }
  if (dtype === "u32" && !(data instanceof Uint32Array)) {
    throw new DtypeMismatchError("u32 tensor needs a Uint32Array");
  }
  return { dtype, dims, data };
}

export function encodeTensor(t: Tensor): Buffer {
  const header = Buffer.alloc(8 + 12 + 8 * t.dims.length);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(FORMAT_VERSION, 8);
  header.writeUInt32LE(DTYPE_CODE[t.dtype], 12);
  header.writeUInt32LE(t.dims.length, 16);
  t.dims.forEach((d, i) => header.writeBigUInt64LE(BigInt(d), 20 + 8 * i));
  // serialize the payload explicitly little-endian, independent of host order
  const payload = Buffer.alloc(4 * t.data.length);
  if (t.dtype === "f32") {
    const arr = t.data as Float32Array;
    for (let i = 0; i < arr.length; i++) payload.writeFloatLE(arr[i], 4 * i);
  } else {
    const arr = t.data as Uint32Array;
    for (let i = 0; i < arr.length; i++) payload.writeUInt32LE(arr[i], 4 * i);
  }
  return Buffer.concat([header, payload]);
}

export function decodeTensor(buf: Buffer): Tensor {
  if (buf.length < 8 || buf.toString("ascii", 0, 8) !== MAGIC) {
    throw new BadMagicError(`bad magic ${JSON.stringify(buf.toString("ascii", 0, 8))}`);
  }
  if (buf.length < 20) throw new TruncatedPayloadError("header cut short");
  const version = buf.readUInt32LE(8);
  if (version !== FORMAT_VERSION) throw new TensorFileError(`unsupported version ${version}`);
  const code = buf.readUInt32LE(12);
  const ndim = buf.readUInt32LE(16);
  if (buf.length < 20 + 8 * ndim) throw new TruncatedPayloadError("dims cut short");
  const dims: number[] = [];
  for (let i = 0; i < ndim; i++) dims.push(Number(buf.readBigUInt64LE(20 + 8 * i)));
  const count = dims.reduce((a, b) => a * b, 1);
  const offset = 20 + 8 * ndim;
  if (buf.length < offset + 4 * count) {
    throw new TruncatedPayloadError(`expected ${4 * count} payload bytes, got ${buf.length - offset}`);
  }
  if (code === 0) {
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = buf.readFloatLE(offset + 4 * i);
    return { dtype: "f32", dims, data };
  }
  if (code === 1) {
    const data = new Uint32Array(count);
    for (let i = 0; i < count; i++) data[i] = buf.readUInt32LE(offset + 4 * i);
    return { dtype: "u32", dims, data };
  }
  throw new DtypeMismatchError(`unknown dtype code ${code}`);
}

export function writeTensor(path: string, t: Tensor): void {
  fs.writeFileSync(path, encodeTensor(t));
}

export function readTensor(path: string): Tensor {
  return decodeTensor(fs.readFileSync(path));
}
