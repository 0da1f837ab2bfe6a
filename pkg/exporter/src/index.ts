export { Backbone, BackboneOutput, localBackbone } from "./backbone.js";
export { exportGt, exportImage, ExportManifest } from "./export.js";
export { decodeImage, decodeIndexMask, resizeLongestSide, FloatImage } from "./image.js";
export {
  BadMagicError,
  DtypeMismatchError,
  Tensor,
  TensorFileError,
  TruncatedPayloadError,
  decodeTensor,
  encodeTensor,
  readTensor,
  tensor,
  writeTensor,
} from "./tensorfile.js";
