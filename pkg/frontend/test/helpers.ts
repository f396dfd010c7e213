/**
 * Test-side writer for the weights container, implemented independently of
 * the reader so round-trip tests exercise both directions of the format.
 */
import { createHash } from "node:crypto";

export interface ArraySpec {
  shape: number[];
  data: Float32Array;
}

export function buildContainer(
  metadata: Record<string, string>,
  arrays: Record<string, ArraySpec>,
): Buffer {
  const parts: Buffer[] = [];
  const u32 = (v: number) => {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(v, 0);
    return b;
  };
  const str = (s: string) => {
    const raw = Buffer.from(s, "utf-8");
    return Buffer.concat([u32(raw.length), raw]);
  };

  parts.push(Buffer.from("PADW", "latin1"), u32(1));
  const keys = Object.keys(metadata).sort();
  parts.push(u32(keys.length));
  for (const k of keys) parts.push(str(k), str(metadata[k]));
  const names = Object.keys(arrays);
  parts.push(u32(names.length));
  for (const name of names) {
    const { shape, data } = arrays[name];
    parts.push(str(name), u32(shape.length));
    for (const d of shape) parts.push(u32(d));
    const buf = Buffer.alloc(4 * data.length);
    for (let i = 0; i < data.length; i++) buf.writeFloatLE(data[i], 4 * i);
    parts.push(buf);
  }
  const body = Buffer.concat(parts);
  return Buffer.concat([body, createHash("sha256").update(body).digest()]);
}

export function defaultMetadata(over: Record<string, string> = {}): Record<string, string> {
  return {
    format: "padding-generator",
    span: "50.0",
    bins: "16",
    t_min: "0.01",
    n_download: "100.0",
    upload_ratio: "5.0",
    restart_threshold: "9",
    preload_mean_delay: "0.1",
    first_bin_max: "10",
    noise_dim: "4",
    live_norm_z: "11.090354888959125",
    run_hash: "",
    ...over,
  };
}

/** Generator arrays (hidden H, noise D), all zeros unless a filler is given. */
export function generatorArrays(
  H: number,
  D: number,
  fill: (name: string, i: number) => number = () => 0,
): Record<string, ArraySpec> {
  const make = (name: string, shape: number[]): [string, ArraySpec] => {
    const n = shape.reduce((a, b) => a * b, 1);
    const data = new Float32Array(n);
    for (let i = 0; i < n; i++) data[i] = fill(name, i);
    return [name, { shape, data }];
  };
  return Object.fromEntries([
    make("lstm.weight_ih", [4 * H, D + 2]),
    make("lstm.weight_hh", [4 * H, H]),
    make("lstm.bias", [4 * H]),
    make("head.weight", [1, H]),
    make("head.bias", [1]),
  ]);
}
