/**
 * Reader for the padding-generator weights container (`.padw`).
 *
 * Layout (all integers little-endian u32, floats IEEE-754 binary32 LE):
 *   magic "PADW" | version | n_meta | (key, value) pairs | n_arrays |
 *   (name, ndim, shape, f32 data) entries | trailing SHA-256 of the body.
 *
 * The checksum is verified before any field is parsed; bad magic or an
 * unknown version is rejected outright.
 */
import { createHash } from "node:crypto";

export const WEIGHTS_MAGIC = "PADW";
export const WEIGHTS_VERSION = 1;

export class WeightsFormatError extends Error {}
export class ChecksumError extends WeightsFormatError {}
export class VersionError extends WeightsFormatError {}

export interface NamedArray {
  shape: number[];
  data: Float32Array;
}

export interface WeightsFile {
  metadata: Record<string, string>;
  arrays: Record<string, NamedArray>;
}

/** Bin geometry and policy constants carried in the metadata block. */
export interface PolicyConfig {
  span: number;
  bins: number;
  tMin: number;
  nDownload: number;
  uploadRatio: number;
  restartThreshold: number;
  preloadMeanDelay: number;
  firstBinMax: number;
  noiseDim: number;
  liveNormZ: number;
}

class Cursor {
  pos = 0;
  constructor(private buf: Buffer) {}

  private need(n: number): void {
    if (this.pos + n > this.buf.length) {
      throw new WeightsFormatError("weights body truncated");
    }
  }

  u32(): number {
    this.need(4);
    const v = this.buf.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }

  str(): string {
    const len = this.u32();
    this.need(len);
    const s = this.buf.subarray(this.pos, this.pos + len).toString("utf-8");
    this.pos += len;
    return s;
  }

  bytes(n: number): Buffer {
    this.need(n);
    const b = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return b;
  }
}

export function parseWeights(blob: Buffer): WeightsFile {
  if (blob.length < 4 + 8 + 32) {
    throw new WeightsFormatError("file too short to be a weights container");
  }
  const body = blob.subarray(0, blob.length - 32);
  const digest = blob.subarray(blob.length - 32);
  const actual = createHash("sha256").update(body).digest();
  if (!actual.equals(digest)) {
    throw new ChecksumError("weights file checksum mismatch");
  }

  const cur = new Cursor(body);
  if (cur.bytes(4).toString("latin1") !== WEIGHTS_MAGIC) {
    throw new WeightsFormatError("bad magic; not a weights container");
  }
  const version = cur.u32();
  if (version !== WEIGHTS_VERSION) {
    throw new VersionError(`unsupported weights version ${version}`);
  }

  const metadata: Record<string, string> = {};
  const nMeta = cur.u32();
  for (let i = 0; i < nMeta; i++) {
    const key = cur.str();
    metadata[key] = cur.str();
  }

  const arrays: Record<string, NamedArray> = {};
  const nArrays = cur.u32();
  for (let i = 0; i < nArrays; i++) {
    const name = cur.str();
    const ndim = cur.u32();
    const shape: number[] = [];
    for (let d = 0; d < ndim; d++) shape.push(cur.u32());
    const count = shape.reduce((a, b) => a * b, 1);
    const raw = cur.bytes(4 * count);
    // copy to an aligned buffer; subarray offsets need not be 4-aligned
    const data = new Float32Array(count);
    for (let j = 0; j < count; j++) data[j] = raw.readFloatLE(4 * j);
    arrays[name] = { shape, data };
  }
  return { metadata, arrays };
}

function metaNumber(meta: Record<string, string>, key: string): number {
  const raw = meta[key];
  if (raw === undefined) {
    throw new WeightsFormatError(`metadata missing required key ${key}`);
  }
  const v = Number(raw);
  if (!Number.isFinite(v)) {
    throw new WeightsFormatError(`metadata key ${key} is not a number: ${raw}`);
  }
  return v;
}

export function policyFromMetadata(meta: Record<string, string>): PolicyConfig {
  if (meta["format"] !== "padding-generator") {
    throw new WeightsFormatError(
      `not a padding-generator file (format=${meta["format"]})`,
    );
  }
  return {
    span: metaNumber(meta, "span"),
    bins: metaNumber(meta, "bins"),
    tMin: metaNumber(meta, "t_min"),
    nDownload: metaNumber(meta, "n_download"),
    uploadRatio: metaNumber(meta, "upload_ratio"),
    restartThreshold: metaNumber(meta, "restart_threshold"),
    preloadMeanDelay: metaNumber(meta, "preload_mean_delay"),
    firstBinMax: metaNumber(meta, "first_bin_max"),
    noiseDim: metaNumber(meta, "noise_dim"),
    liveNormZ: metaNumber(meta, "live_norm_z"),
  };
}

/**
 * Bin edges: 0, then `bins` points geometrically spaced from tMin to span.
 * Bin b covers [edges[b], edges[b+1]); bin 0 is the [0, tMin) stub.
 */
export function binEdges(policy: PolicyConfig): Float64Array {
  const { span, bins, tMin } = policy;
  if (!(tMin > 0 && tMin < span) || bins < 2) {
    throw new WeightsFormatError(
      `invalid bin geometry: span=${span} bins=${bins} t_min=${tMin}`,
    );
  }
  const edges = new Float64Array(bins + 1);
  edges[0] = 0;
  const ratio = Math.log(span / tMin) / (bins - 1);
  for (let i = 0; i < bins; i++) edges[i + 1] = tMin * Math.exp(ratio * i);
  edges[bins] = span; // pin the endpoint against rounding drift
  return edges;
}
