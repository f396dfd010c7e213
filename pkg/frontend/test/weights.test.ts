import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import {
  ChecksumError,
  VersionError,
  WeightsFormatError,
  binEdges,
  parseWeights,
  policyFromMetadata,
} from "../src/weights.js";
import { buildContainer, defaultMetadata, generatorArrays } from "./helpers.js";

const FIXTURE = new URL("../fixtures/generator.padw", import.meta.url);
const GOLDEN = new URL("../fixtures/golden_infer.json", import.meta.url);

describe("parseWeights on the trainer-exported fixture", () => {
  const blob = readFileSync(FIXTURE);

  it("parses all five generator arrays with coherent shapes", () => {
    const w = parseWeights(blob);
    const H = w.arrays["lstm.weight_hh"].shape[1];
    expect(w.arrays["lstm.weight_ih"].shape).toEqual([4 * H, 32]);
    expect(w.arrays["lstm.weight_hh"].shape).toEqual([4 * H, H]);
    expect(w.arrays["lstm.bias"].shape).toEqual([4 * H]);
    expect(w.arrays["head.weight"].shape).toEqual([1, H]);
    expect(w.arrays["head.bias"].shape).toEqual([1]);
  });

  it("matches the sha256 recorded in the golden vectors", () => {
    const golden = JSON.parse(readFileSync(GOLDEN, "utf-8"));
    const digest = createHash("sha256").update(blob).digest("hex");
    expect(digest).toBe(golden.weights_sha256);
  });

  it("exposes the policy metadata", () => {
    const policy = policyFromMetadata(parseWeights(blob).metadata);
    expect(policy.bins).toBe(256);
    expect(policy.span).toBe(50);
    expect(policy.tMin).toBeCloseTo(0.01, 12);
    expect(policy.noiseDim).toBe(30);
    expect(policy.nDownload).toBeGreaterThan(0);
    expect(policy.liveNormZ).toBeGreaterThan(0);
  });

  it("rejects a flipped payload byte", () => {
    const bad = Buffer.from(blob);
    bad[1000] ^= 0x01;
    expect(() => parseWeights(bad)).toThrow(ChecksumError);
  });

  it("rejects truncation", () => {
    expect(() => parseWeights(blob.subarray(0, blob.length - 40))).toThrow(
      WeightsFormatError,
    );
    expect(() => parseWeights(blob.subarray(0, 10))).toThrow(WeightsFormatError);
  });
});

describe("parseWeights against an independent writer", () => {
  it("round-trips metadata and array contents", () => {
    const arrays = generatorArrays(3, 2, (name, i) => i * 0.5 - 1);
    const blob = buildContainer(defaultMetadata({ run_hash: "abc123" }), arrays);
    const w = parseWeights(blob);
    expect(w.metadata.run_hash).toBe("abc123");
    expect(w.arrays["lstm.weight_ih"].shape).toEqual([12, 4]);
    expect(Array.from(w.arrays["head.bias"].data)).toEqual([-1]);
    expect(w.arrays["lstm.bias"].data[3]).toBeCloseTo(0.5, 6);
  });

  it("rejects an unknown version", () => {
    const blob = buildContainer(defaultMetadata(), generatorArrays(2, 2));
    blob.writeUInt32LE(99, 4);
    // fix up the checksum so only the version is wrong
    const body = blob.subarray(0, blob.length - 32);
    createHash("sha256").update(body).digest().copy(blob, blob.length - 32);
    expect(() => parseWeights(blob)).toThrow(VersionError);
  });

  it("rejects bad magic", () => {
    const blob = buildContainer(defaultMetadata(), generatorArrays(2, 2));
    blob.write("NOPE", 0, "latin1");
    const body = blob.subarray(0, blob.length - 32);
    createHash("sha256").update(body).digest().copy(blob, blob.length - 32);
    expect(() => parseWeights(blob)).toThrow(/magic/);
  });

  it("rejects a non-generator format key in policyFromMetadata", () => {
    const meta = defaultMetadata({ format: "module-checkpoint" });
    const blob = buildContainer(meta, {});
    expect(() => policyFromMetadata(parseWeights(blob).metadata)).toThrow(
      /padding-generator/,
    );
  });

  it("reports which metadata key is missing", () => {
    const meta = defaultMetadata();
    delete meta.live_norm_z;
    const blob = buildContainer(meta, generatorArrays(2, 2));
    expect(() => policyFromMetadata(parseWeights(blob).metadata)).toThrow(
      /live_norm_z/,
    );
  });
});

describe("binEdges", () => {
  const policy = policyFromMetadata(
    parseWeights(buildContainer(defaultMetadata({ bins: "256" }), {})).metadata,
  );

  it("builds L+1 strictly increasing edges from 0 to span", () => {
    const edges = binEdges(policy);
    expect(edges.length).toBe(257);
    expect(edges[0]).toBe(0);
    expect(edges[1]).toBeCloseTo(policy.tMin, 12);
    expect(edges[256]).toBe(policy.span);
    for (let i = 1; i < edges.length; i++) expect(edges[i]).toBeGreaterThan(edges[i - 1]);
  });

  it("keeps the geometric ratio constant", () => {
    const edges = binEdges(policy);
    const r0 = edges[2] / edges[1];
    for (let i = 2; i < 256; i++) {
      expect(edges[i + 1] / edges[i]).toBeCloseTo(r0, 9);
    }
  });
});
