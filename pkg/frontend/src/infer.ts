/**
 * Float64 replay of the trained padding generator: a single-layer LSTM
 * (merged gate bias; the recurrent-recurrent bias is zero by construction)
 * followed by a softplus-activated linear head.
 *
 * Cross-implementation equivalence with the trainer is specified to 1e-5
 * absolute on raw intensities; parameters are binary32, accumulation here
 * is binary64.
 */
import { NamedArray, WeightsFile, WeightsFormatError } from "./weights.js";

export class NonFiniteError extends Error {}

/** log1p(v) / log1p(1000) — compresses a packet count into a bounded feature. */
export function scaleVolume(v: number): number {
  return Math.log1p(v) / Math.log1p(1000);
}

/** Numerically stable log(1 + e^x). */
export function softplus(x: number): number {
  if (x > 30) return x + Math.log1p(Math.exp(-x));
  return Math.log1p(Math.exp(x));
}

function sigmoid(x: number): number {
  return 1 / (1 + Math.exp(-x));
}

export interface LstmState {
  h: Float64Array;
  c: Float64Array;
}

const REQUIRED = [
  "lstm.weight_ih",
  "lstm.weight_hh",
  "lstm.bias",
  "head.weight",
  "head.bias",
] as const;

export class GeneratorRuntime {
  readonly noiseDim: number;
  readonly hidden: number;
  private wIh: Float32Array; // [4H, D+2] row-major
  private wHh: Float32Array; // [4H, H]
  private bias: Float64Array; // [4H]
  private headW: Float32Array; // [H]
  private headB: number;

  constructor(weights: WeightsFile) {
    for (const name of REQUIRED) {
      if (!(name in weights.arrays)) {
        throw new WeightsFormatError(`missing array ${name}`);
      }
    }
    const wIh = weights.arrays["lstm.weight_ih"];
    const wHh = weights.arrays["lstm.weight_hh"];
    const bias = weights.arrays["lstm.bias"];
    const headW = weights.arrays["head.weight"];
    const headB = weights.arrays["head.bias"];

    this.hidden = shape2(wHh)[1];
    this.noiseDim = shape2(wIh)[1] - 2;
    const H = this.hidden;
    expectShape(wIh, [4 * H, this.noiseDim + 2], "lstm.weight_ih");
    expectShape(wHh, [4 * H, H], "lstm.weight_hh");
    expectShape(bias, [4 * H], "lstm.bias");
    expectShape(headW, [1, H], "head.weight");
    expectShape(headB, [1], "head.bias");

    this.wIh = wIh.data;
    this.wHh = wHh.data;
    this.bias = Float64Array.from(bias.data);
    this.headW = headW.data;
    this.headB = headB.data[0];
  }

  initialState(): LstmState {
    return {
      h: new Float64Array(this.hidden),
      c: new Float64Array(this.hidden),
    };
  }

  /**
   * One generator step: consume a noise vector, the previous bin's real
   * download volume, and the bin-start fraction of the span; return the
   * next state and the non-negative raw padding intensity.
   */
  inferStep(
    state: LstmState | null,
    noise: ArrayLike<number>,
    prevVol: number,
    tFeat: number,
  ): { state: LstmState; raw: number } {
    const D = this.noiseDim;
    const H = this.hidden;
    if (noise.length !== D) {
      throw new WeightsFormatError(`noise must have ${D} entries`);
    }
    const x = new Float64Array(D + 2);
    for (let i = 0; i < D; i++) x[i] = noise[i];
    x[D] = scaleVolume(prevVol);
    x[D + 1] = tFeat;
    for (let i = 0; i < D + 2; i++) {
      if (!Number.isFinite(x[i])) {
        throw new NonFiniteError("generator step received non-finite inputs");
      }
    }
    const prev = state ?? this.initialState();

    // gates = W_ih x + W_hh h + bias, in torch gate order (i, f, g, o)
    const gates = new Float64Array(4 * H);
    for (let r = 0; r < 4 * H; r++) {
      let acc = this.bias[r];
      const ihOff = r * (D + 2);
      for (let k = 0; k < D + 2; k++) acc += this.wIh[ihOff + k] * x[k];
      const hhOff = r * H;
      for (let k = 0; k < H; k++) acc += this.wHh[hhOff + k] * prev.h[k];
      gates[r] = acc;
    }

    const next: LstmState = { h: new Float64Array(H), c: new Float64Array(H) };
    for (let j = 0; j < H; j++) {
      const i = sigmoid(gates[j]);
      const f = sigmoid(gates[H + j]);
      const g = Math.tanh(gates[2 * H + j]);
      const o = sigmoid(gates[3 * H + j]);
      const c = f * prev.c[j] + i * g;
      next.c[j] = c;
      next.h[j] = o * Math.tanh(c);
    }

    let pre = this.headB;
    for (let k = 0; k < H; k++) pre += this.headW[k] * next.h[k];
    const raw = softplus(pre);
    if (!Number.isFinite(raw)) {
      throw new NonFiniteError("generator produced a non-finite intensity");
    }
    return { state: next, raw };
  }
}

function shape2(arr: NamedArray): [number, number] {
  if (arr.shape.length !== 2) {
    throw new WeightsFormatError(`expected a 2-D array, got shape ${arr.shape}`);
  }
  return [arr.shape[0], arr.shape[1]];
}

function expectShape(arr: NamedArray, want: number[], name: string): void {
  const got = arr.shape;
  if (got.length !== want.length || got.some((v, i) => v !== want[i])) {
    throw new WeightsFormatError(
      `array ${name} has shape [${got}], expected [${want}]`,
    );
  }
}
