import net from "node:net";
import { readFileSync } from "node:fs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { Addr, RunningProxy, startProxy } from "../src/proxy.js";
import { buildContainer, defaultMetadata, generatorArrays } from "./helpers.js";

const FIXTURE = new URL("../fixtures/generator.padw", import.meta.url);

function listenEcho(): Promise<{ addr: Addr; close: () => void }> {
  const server = net.createServer((sock) => {
    sock.on("data", (chunk) => sock.write(chunk));
    sock.on("end", () => sock.end());
    sock.on("error", () => sock.destroy());
  });
  return new Promise((resolve) => {
    server.listen(0, "127.0.0.1", () => {
      const a = server.address() as net.AddressInfo;
      resolve({
        addr: { host: "127.0.0.1", port: a.port },
        close: () => server.close(),
      });
    });
  });
}

function connect(addr: Addr): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const sock = net.connect(addr.port, addr.host, () => resolve(sock));
    sock.once("error", reject);
  });
}

function collectUntil(sock: net.Socket, n: number, timeoutMs = 15000): Promise<Buffer> {
  return new Promise((resolve, reject) => {
    const chunks: Buffer[] = [];
    let got = 0;
    const cleanup = () => {
      clearTimeout(timer);
      sock.off("data", onData);
      sock.off("error", onError);
    };
    const timer = setTimeout(() => {
      cleanup();
      reject(new Error(`timed out with ${got}/${n} bytes`));
    }, timeoutMs);
    const onData = (chunk: Buffer) => {
      chunks.push(chunk);
      got += chunk.length;
      if (got >= n) {
        cleanup();
        resolve(Buffer.concat(chunks).subarray(0, n));
      }
    };
    const onError = (err: Error) => {
      cleanup();
      reject(err);
    };
    sock.on("data", onData);
    sock.on("error", onError);
  });
}

function patterned(size: number, tag: number): Buffer {
  const buf = Buffer.alloc(size);
  for (let i = 0; i < size; i++) buf[i] = (i * 31 + tag * 7) & 0xff;
  return buf;
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

describe("shim pair with trained weights", () => {
  let echo: Awaited<ReturnType<typeof listenEcho>>;
  let bridge: RunningProxy;
  let client: RunningProxy;

  beforeAll(async () => {
    echo = await listenEcho();
    const weights = readFileSync(FIXTURE);
    bridge = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: echo.addr,
      mode: "bridge",
      weights,
      seed: 7,
    });
    client = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: bridge.address(),
      mode: "client",
      weights,
      seed: 7,
    });
  });

  afterAll(async () => {
    await client.close();
    await bridge.close();
    echo.close();
  });

  it("echoes payload bytes exactly, in order, across sizes", async () => {
    const sock = await connect(client.address());
    const sizes = [1, 5, 513, 514, 515, 4096, 100_000, 2, 777];
    for (let i = 0; i < sizes.length; i++) {
      const msg = patterned(sizes[i], i);
      sock.write(msg);
      const back = await collectUntil(sock, msg.length);
      expect(back.equals(msg), `message ${i} (${sizes[i]} bytes)`).toBe(true);
    }
    sock.destroy();
  });

  it("sustains five concurrent sessions without corruption", async () => {
    const before = bridge.sessions.filter((s) => s.active).length;
    await Promise.all(
      Array.from({ length: 5 }, async (_, id) => {
        const sock = await connect(client.address());
        for (let round = 0; round < 25; round++) {
          const msg = patterned(800 + 100 * id + round, id * 100 + round);
          sock.write(msg);
          const back = await collectUntil(sock, msg.length);
          expect(back.equals(msg)).toBe(true);
        }
        sock.destroy();
      }),
    );
    expect(bridge.sessions.length - before).toBeGreaterThanOrEqual(5);
    const latest = bridge.sessions.slice(-5);
    for (const { session } of latest) {
      expect(session.counters.realDown).toBeGreaterThan(0);
      expect(session.counters.realUp).toBeGreaterThan(0);
    }
  });

  it("adds less than a millisecond of forwarding delay unloaded", async () => {
    const sock = await connect(client.address());
    const msg = patterned(128, 9);
    // warm the path (connection setup, first-round generator work)
    for (let i = 0; i < 20; i++) {
      sock.write(msg);
      await collectUntil(sock, msg.length);
    }
    const oneWayMs: number[] = [];
    for (let i = 0; i < 200; i++) {
      const t0 = process.hrtime.bigint();
      sock.write(msg);
      await collectUntil(sock, msg.length);
      const rtt = Number(process.hrtime.bigint() - t0) / 1e6;
      // four shim traversals per echo round trip
      oneWayMs.push(rtt / 4);
    }
    oneWayMs.sort((a, b) => a - b);
    const median = oneWayMs[Math.floor(oneWayMs.length / 2)];
    expect(median).toBeLessThan(1.0);
    sock.destroy();
  });
});

describe("padding behavior end to end", () => {
  // short rounds so a full defense round fits in test time
  const fastWeights = buildContainer(
    defaultMetadata({
      span: "0.5",
      bins: "8",
      n_download: "40.0",
      live_norm_z: String(Math.log(2) * 8),
      preload_mean_delay: "0.02",
      first_bin_max: "3",
    }),
    generatorArrays(8, 4),
  );

  it("injects dummy frames between the shims, strips them at endpoints, and stays quiet once idle", async () => {
    const echo = await listenEcho();
    const bridge = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: echo.addr,
      mode: "bridge",
      weights: fastWeights,
      seed: 3,
    });
    const client = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: bridge.address(),
      mode: "client",
      weights: fastWeights,
      seed: 3,
    });
    try {
      const sock = await connect(client.address());
      let received = Buffer.alloc(0);
      sock.on("data", (c) => (received = Buffer.concat([received, c])));

      // 12 small messages: enough downstream events to start a round
      let sent = Buffer.alloc(0);
      for (let i = 0; i < 12; i++) {
        const msg = patterned(64, i);
        sent = Buffer.concat([sent, msg]);
        sock.write(msg);
        await sleep(15);
      }
      await sleep(800); // span is 0.5 s: the round completes

      const bsession = bridge.sessions[0].session;
      const csession = client.sessions[0].session;
      expect(bsession.counters.rounds).toBe(1);
      expect(bsession.counters.dummyDown).toBeGreaterThan(10);
      // the client shim stripped what the bridge injected
      expect(csession.counters.dummyDown).toBe(bsession.counters.dummyDown);
      // upload padding flowed the other way and was stripped at the bridge
      expect(bsession.counters.dummyUp).toBe(csession.counters.dummyUp);
      // endpoints saw only real bytes
      expect(received.equals(sent)).toBe(true);

      // idle after the round: dummy counters freeze
      const frozenDown = bsession.counters.dummyDown;
      const frozenUp = csession.counters.dummyUp;
      await sleep(600);
      expect(bsession.counters.dummyDown).toBe(frozenDown);
      expect(csession.counters.dummyUp).toBeLessThanOrEqual(frozenUp + 1);
      sock.destroy();
    } finally {
      await client.close();
      await bridge.close();
      echo.close();
    }
  });

  it("drops the client connection when the upstream is unreachable", async () => {
    const bridge = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: { host: "127.0.0.1", port: 1 }, // nothing listens there
      mode: "bridge",
      weights: fastWeights,
      seed: 1,
    });
    try {
      const sock = await connect(bridge.address());
      await new Promise<void>((resolve) => sock.once("close", () => resolve()));
    } finally {
      await bridge.close();
    }
  });
});

describe("metrics endpoint", () => {
  it("serves per-session counters as line-delimited records", async () => {
    const echo = await listenEcho();
    const proxy = await startProxy({
      listen: { host: "127.0.0.1", port: 0 },
      upstream: echo.addr,
      mode: "bridge",
      weights: readFileSync(FIXTURE),
      seed: 0,
      metricsAddr: { host: "127.0.0.1", port: 0 },
    });
    try {
      const sock = await connect(proxy.address());
      sock.write(patterned(300, 1));
      await sleep(100);

      const m = proxy.metricsAddress()!;
      const res = await fetch(`http://${m.host}:${m.port}/metrics`);
      expect(res.status).toBe(200);
      const text = await res.text();
      const lines = text.trim().split("\n");
      expect(lines.length).toBeGreaterThanOrEqual(1);
      expect(lines[0]).toMatch(
        /^session=\d+ role=bridge active=[01] real_down=\d+ dummy_down=\d+ real_up=\d+ dummy_up=\d+ rounds=\d+$/,
      );

      const miss = await fetch(`http://${m.host}:${m.port}/other`);
      expect(miss.status).toBe(404);
      sock.destroy();
    } finally {
      await proxy.close();
      echo.close();
    }
  });
});
