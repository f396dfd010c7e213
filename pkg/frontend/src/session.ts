/**
 * Per-connection padding state machine.
 *
 * The bridge-side shim runs the generator-driven downstream policy: preload
 * padding from connection start until the 10th downstream data event (the
 * round origin), then one LSTM-scheduled dummy volume per time bin with the
 * causal live normalization (dummy_t = N * raw_t / Z, cumulative total
 * capped at 2N), and a restart once more than `restartThreshold` further
 * downstream events arrive after a round ends.  The client-side shim runs
 * the ratio-preserving upload padding poll.
 *
 * Real traffic never passes through this class — the proxy forwards it
 * synchronously — so padding decisions can never delay real bytes.  All
 * times are seconds relative to the session start.
 */
import { GeneratorRuntime, LstmState } from "./infer.js";
import { RateMeter, uploadPaddingStep } from "./ratemeter.js";
import { Rng } from "./rng.js";
import { PolicyConfig, binEdges } from "./weights.js";

/** Upload-ratio polling cadence, seconds. */
export const POLL_INTERVAL = 0.005;

/** The downstream data event whose arrival starts a defense round. */
export const ORIGIN_PACKET = 10;

export type Role = "client" | "bridge";

export interface SessionCallbacks {
  /** Bridge role: emit one dummy frame toward the client shim. */
  sendDummyDownstream?: () => void;
  /** Client role: emit one dummy frame toward the bridge shim. */
  sendDummyUpstream?: () => void;
}

export interface SessionCounters {
  realDown: number;
  dummyDown: number;
  realUp: number;
  dummyUp: number;
  rounds: number;
}

type Phase = "preload" | "round" | "idle";

export class Session {
  readonly id: number;
  readonly role: Role;
  readonly counters: SessionCounters = {
    realDown: 0,
    dummyDown: 0,
    realUp: 0,
    dummyUp: 0,
    rounds: 0,
  };

  private policy: PolicyConfig;
  private runtime: GeneratorRuntime | null;
  private rng: Rng;
  private callbacks: SessionCallbacks;
  private edges: Float64Array;

  // bridge-side downstream machine
  private phase: Phase = "preload";
  private downstreamEvents = 0;
  private nextPreloadT: number;
  private origin = 0;
  private binIdx = 0; // next bin to open
  private lstmState: LstmState | null = null;
  private realVolByBin: Float64Array;
  private realBinPtr = 0; // bin receiving real downstream counts
  private sentVol = 0; // cumulative dummy volume this round (cap 2N)
  private fracCarry = 0; // fractional dummy volume carried across bins
  private emitQueue: number[] = []; // scheduled dummy times, ascending
  private postRoundEvents = 0;

  // client-side upload machine
  private upMeter = new RateMeter();
  private downMeter = new RateMeter();
  private lastPollT = 0;

  constructor(opts: {
    id: number;
    role: Role;
    policy: PolicyConfig;
    runtime?: GeneratorRuntime | null;
    rng: Rng;
    callbacks: SessionCallbacks;
  }) {
    this.id = opts.id;
    this.role = opts.role;
    this.policy = opts.policy;
    this.runtime = opts.runtime ?? null;
    this.rng = opts.rng;
    this.callbacks = opts.callbacks;
    this.edges = binEdges(this.policy);
    this.realVolByBin = new Float64Array(this.policy.bins);
    this.nextPreloadT = this.rng.exponential(this.policy.preloadMeanDelay);
    if (this.role === "bridge" && !this.runtime) {
      throw new Error("bridge sessions need a generator runtime");
    }
  }

  /** One real downstream frame (bridge: about to forward; client: received). */
  onDownstreamReal(t: number): void {
    this.counters.realDown += 1;
    if (this.role === "client") {
      this.downMeter.onEvent(this.meterT(t));
      return;
    }
    this.downstreamEvents += 1;
    if (this.phase === "preload") {
      if (this.downstreamEvents >= ORIGIN_PACKET) this.startRound(t);
      return;
    }
    if (this.phase === "round" && t - this.origin >= this.policy.span) {
      this.finishRound();
    }
    if (this.phase === "round") {
      const rel = t - this.origin;
      if (rel >= 0) {
        while (
          this.realBinPtr < this.policy.bins - 1 &&
          rel >= this.edges[this.realBinPtr + 1]
        ) {
          this.realBinPtr += 1;
        }
        this.realVolByBin[this.realBinPtr] += 1;
      }
    } else {
      this.postRoundEvents += 1;
      if (this.postRoundEvents > this.policy.restartThreshold) {
        this.startRound(t);
      }
    }
  }

  /** A downstream dummy frame seen by the client shim (feeds the down meter). */
  onDownstreamDummy(t: number): void {
    this.counters.dummyDown += 1;
    if (this.role === "client") this.downMeter.onEvent(this.meterT(t));
  }

  /** One real upstream frame. */
  onUpstreamReal(t: number): void {
    this.counters.realUp += 1;
    if (this.role === "client") this.upMeter.onEvent(this.meterT(t));
  }

  /** An upstream dummy frame stripped by the bridge shim. */
  onUpstreamDummy(_t: number): void {
    this.counters.dummyUp += 1;
  }

  /** Timer-driven work; call every POLL_INTERVAL (and on teardown). */
  tick(t: number): void {
    if (this.role === "bridge") this.tickBridge(t);
    else this.tickClient(t);
  }

  private meterT(t: number): number {
    // rate meters reject time regressions; clamp clock jitter forward
    return Math.max(t, this.upMeter.lastT, this.downMeter.lastT);
  }

  private startRound(t: number): void {
    this.phase = "round";
    this.origin = t;
    this.binIdx = 0;
    this.lstmState = null;
    this.realVolByBin.fill(0);
    this.realVolByBin[0] = 1; // the origin event is itself downstream data
    this.realBinPtr = 0;
    this.sentVol = 0;
    this.fracCarry = 0;
    this.emitQueue.length = 0;
    this.postRoundEvents = 0;
    this.counters.rounds += 1;
  }

  private finishRound(): void {
    // spillover dummies are pinned to the span boundary
    const leftover = this.emitQueue.length;
    this.emitQueue.length = 0;
    for (let i = 0; i < leftover; i++) this.emitDummyDown();
    this.phase = "idle";
    this.postRoundEvents = 0;
  }

  private tickBridge(t: number): void {
    if (this.phase === "preload") {
      while (this.nextPreloadT <= t) {
        this.emitDummyDown();
        this.nextPreloadT += this.rng.exponential(this.policy.preloadMeanDelay);
      }
      return;
    }
    if (this.phase !== "round") return;

    const rel = t - this.origin;
    while (this.binIdx < this.policy.bins && rel >= this.edges[this.binIdx]) {
      this.openBin(this.binIdx);
      this.binIdx += 1;
    }
    let emitted = 0;
    while (emitted < this.emitQueue.length && this.emitQueue[emitted] <= rel) {
      emitted += 1;
    }
    if (emitted > 0) {
      this.emitQueue.splice(0, emitted);
      for (let i = 0; i < emitted; i++) this.emitDummyDown();
    }
    if (rel >= this.policy.span) this.finishRound();
  }

  private openBin(b: number): void {
    const { nDownload, liveNormZ, firstBinMax } = this.policy;
    const raw =
      b === 0
        ? this.rng.int(0, firstBinMax)
        : this.stepGenerator(b);
    const scaled = (nDownload * raw) / liveNormZ;
    const capped = Math.min(scaled, Math.max(0, 2 * nDownload - this.sentVol));
    this.sentVol += capped;
    const withCarry = capped + this.fracCarry;
    const count = Math.floor(withCarry);
    this.fracCarry = withCarry - count;
    if (count <= 0) return;

    // one burst per bin: uniform start, exponential gaps filling the bin
    const start = this.edges[b];
    const width = this.edges[b + 1] - start;
    let at = start + this.rng.uniform(0, width);
    for (let i = 0; i < count; i++) {
      if (i > 0) at += this.rng.exponential(width / count);
      this.emitQueue.push(Math.min(at, this.policy.span));
    }
  }

  private stepGenerator(b: number): number {
    const { state, raw } = this.runtime!.inferStep(
      this.lstmState,
      this.rng.normalVec(this.runtime!.noiseDim),
      this.realVolByBin[b - 1],
      this.edges[b] / this.policy.span,
    );
    this.lstmState = state;
    return raw;
  }

  private emitDummyDown(): void {
    this.counters.dummyDown += 1;
    this.callbacks.sendDummyDownstream?.();
  }

  private tickClient(t: number): void {
    if (t < this.lastPollT) return;
    this.lastPollT = t;
    const mt = this.meterT(t);
    if (uploadPaddingStep(this.upMeter, this.downMeter, mt, this.policy.uploadRatio)) {
      this.upMeter.onEvent(mt);
      this.counters.dummyUp += 1;
      this.callbacks.sendDummyUpstream?.();
    }
  }
}
