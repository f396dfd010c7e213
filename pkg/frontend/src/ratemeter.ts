/**
 * Exponentially weighted instantaneous event-rate estimator.
 *
 * Each event bumps the estimate by the decay constant k; between events the
 * estimate decays as e^{-k dt}.  The O(1) recurrence
 *
 *     estimate <- k + e^{-k (t - t_prev)} * estimate
 *
 * equals the direct sum k * sum_i e^{-k (t - t_i)} over the full history.
 */

export class TimeRegressionError extends Error {}

export class RateMeter {
  estimate = 0;
  lastT = 0;

  constructor(readonly k: number = 1.0) {}

  /** Decayed rate estimate at time t; does not mutate state. */
  read(t: number): number {
    if (t < this.lastT) {
      throw new TimeRegressionError(
        `read at t=${t} before meter clock ${this.lastT}`,
      );
    }
    return Math.exp(-this.k * (t - this.lastT)) * this.estimate;
  }

  /** Commit one event at time t; returns the updated estimate. */
  onEvent(t: number): number {
    if (t < this.lastT) {
      throw new TimeRegressionError(
        `event at t=${t} before meter clock ${this.lastT}`,
      );
    }
    this.estimate = this.k + Math.exp(-this.k * (t - this.lastT)) * this.estimate;
    this.lastT = t;
    return this.estimate;
  }
}

/**
 * Ratio-preserving upload padding decision: emit a dummy upload at time t
 * iff the upload rate has fallen below download rate / ratio.  On true the
 * caller commits up.onEvent(t) so the sent dummy counts toward the rate.
 */
export function uploadPaddingStep(
  up: RateMeter,
  down: RateMeter,
  t: number,
  ratio: number,
): boolean {
  return up.read(t) < down.read(t) / ratio;
}
