/**
 * TCP padding shim. One listener, one upstream target, one padding session
 * per accepted connection; weights are parsed once and shared immutably.
 *
 * Two roles compose into a defended link:
 *
 *   app client --raw--> [client shim] --framed--> [bridge shim] --raw--> server
 *
 * The side facing the peer shim speaks the REAL/DUMMY framing; the other
 * side is plain TCP.  Real chunks are forwarded synchronously on arrival
 * (write-through, never queued behind padding work); dummy frames are
 * injected by the session machine and stripped at the receiving shim.
 */
import http from "node:http";
import net from "node:net";
import { readFileSync } from "node:fs";

import {
  CELL_SIZE,
  FrameParser,
  FrameType,
  encodeDummyFrame,
  encodeRealChunk,
} from "./framing.js";
import { GeneratorRuntime } from "./infer.js";
import { Rng } from "./rng.js";
import { POLL_INTERVAL, Role, Session } from "./session.js";
import { PolicyConfig, parseWeights, policyFromMetadata } from "./weights.js";

export interface Addr {
  host: string;
  port: number;
}

export interface ProxyOptions {
  listen: Addr;
  upstream: Addr;
  mode: Role;
  weights: Buffer | string; // container bytes or a path to them
  seed: number;
  metricsAddr?: Addr;
}

export function parseAddr(s: string): Addr {
  const i = s.lastIndexOf(":");
  const port = Number(s.slice(i + 1));
  if (i <= 0 || !Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`invalid address '${s}' (expected host:port)`);
  }
  return { host: s.slice(0, i), port };
}

export interface SessionRecord {
  session: Session;
  active: boolean;
}

export interface RunningProxy {
  policy: PolicyConfig;
  address: () => Addr;
  metricsAddress: () => Addr | null;
  sessions: SessionRecord[];
  close: () => Promise<void>;
}

/** Pipe with backpressure: pause the source while the sink drains. */
function writeThrough(src: net.Socket, dst: net.Socket, buf: Buffer): void {
  if (dst.destroyed) return;
  if (!dst.write(buf)) {
    src.pause();
    dst.once("drain", () => src.resume());
  }
}

export function startProxy(opts: ProxyOptions): Promise<RunningProxy> {
  const blob =
    typeof opts.weights === "string" ? readFileSync(opts.weights) : opts.weights;
  const weights = parseWeights(blob);
  const policy = policyFromMetadata(weights.metadata);
  const runtime = opts.mode === "bridge" ? new GeneratorRuntime(weights) : null;

  const sessions: SessionRecord[] = [];
  const teardowns = new Set<() => void>();
  let nextId = 0;

  const server = net.createServer((clientSock) => {
    const id = nextId++;
    const upSock = net.connect(opts.upstream.port, opts.upstream.host);
    upSock.setNoDelay(true);
    clientSock.setNoDelay(true);

    // the side facing the peer shim is framed; the other side is raw
    const framedSock = opts.mode === "bridge" ? clientSock : upSock;
    const rawSock = opts.mode === "bridge" ? upSock : clientSock;

    const t0 = process.hrtime.bigint();
    const now = () => Number(process.hrtime.bigint() - t0) / 1e9;
    const dummyRng = new Rng(opts.seed, id * 2 + 1);
    const sendDummy = () => {
      if (!framedSock.destroyed) {
        framedSock.write(encodeDummyFrame((n) => dummyRng.bytes(n)));
      }
    };

    const session = new Session({
      id,
      role: opts.mode,
      policy,
      runtime,
      rng: new Rng(opts.seed, id * 2),
      callbacks: { sendDummyDownstream: sendDummy, sendDummyUpstream: sendDummy },
    });
    const record: SessionRecord = { session, active: true };
    sessions.push(record);

    const parser = new FrameParser();
    const ticker = setInterval(() => session.tick(now()), POLL_INTERVAL * 1000);

    const teardown = () => {
      if (!record.active) return;
      record.active = false;
      teardowns.delete(teardown);
      clearInterval(ticker);
      clientSock.destroy();
      upSock.destroy();
    };
    teardowns.add(teardown);

    rawSock.on("data", (chunk: Buffer) => {
      // raw -> framed: wrap and forward immediately, then account for it
      writeThrough(rawSock, framedSock, encodeRealChunk(chunk));
      const t = now();
      const frames = Math.ceil(chunk.length / CELL_SIZE);
      for (let i = 0; i < frames; i++) {
        if (opts.mode === "bridge") session.onDownstreamReal(t);
        else session.onUpstreamReal(t);
      }
    });

    framedSock.on("data", (chunk: Buffer) => {
      // framed -> raw: strip framing, drop dummies, forward real payloads
      let frames;
      try {
        frames = parser.push(chunk);
      } catch {
        teardown();
        return;
      }
      const t = now();
      for (const frame of frames) {
        if (frame.type === FrameType.REAL) {
          writeThrough(framedSock, rawSock, frame.data);
          if (opts.mode === "bridge") session.onUpstreamReal(t);
          else session.onDownstreamReal(t);
        } else if (opts.mode === "bridge") {
          session.onUpstreamDummy(t);
        } else {
          session.onDownstreamDummy(t);
        }
      }
    });

    for (const sock of [clientSock, upSock]) {
      sock.on("error", teardown);
      sock.on("close", teardown);
    }
    // half-close propagates so protocols relying on FIN still work
    rawSock.on("end", () => framedSock.end());
    framedSock.on("end", () => rawSock.end());
  });

  let metricsServer: http.Server | null = null;
  if (opts.metricsAddr) {
    metricsServer = http.createServer((req, res) => {
      if (req.url === "/metrics") {
        const lines = sessions.map(({ session: s, active }) => {
          const c = s.counters;
          return (
            `session=${s.id} role=${s.role} active=${active ? 1 : 0} ` +
            `real_down=${c.realDown} dummy_down=${c.dummyDown} ` +
            `real_up=${c.realUp} dummy_up=${c.dummyUp} rounds=${c.rounds}`
          );
        });
        res.writeHead(200, { "content-type": "text/plain" });
        res.end(lines.join("\n") + (lines.length ? "\n" : ""));
      } else {
        res.writeHead(404);
        res.end();
      }
    });
  }

  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(opts.listen.port, opts.listen.host, () => {
      const finish = () =>
        resolve({
          policy,
          sessions,
          address: () => {
            const a = server.address() as net.AddressInfo;
            return { host: a.address, port: a.port };
          },
          metricsAddress: () => {
            if (!metricsServer) return null;
            const a = metricsServer.address() as net.AddressInfo;
            return { host: a.address, port: a.port };
          },
          close: () =>
            new Promise<void>((done) => {
              for (const teardown of [...teardowns]) teardown();
              server.close(() => {
                if (metricsServer) metricsServer.close(() => done());
                else done();
              });
            }),
        });
      if (metricsServer) {
        metricsServer.once("error", reject);
        metricsServer.listen(opts.metricsAddr!.port, opts.metricsAddr!.host, finish);
      } else {
        finish();
      }
    });
  });
}
