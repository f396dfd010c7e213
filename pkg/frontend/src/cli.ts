#!/usr/bin/env node
/**
 * Command line for the padding shim.
 *
 *   padproxy --listen 127.0.0.1:9000 --upstream example.org:443 \
 *            --weights generator.padw --mode bridge --seed 7 \
 *            --metrics-addr 127.0.0.1:9100
 */
import { parseArgs } from "node:util";
import { pathToFileURL } from "node:url";

import { parseAddr, startProxy } from "./proxy.js";

const USAGE = `usage: padproxy --listen HOST:PORT --upstream HOST:PORT --weights FILE
                [--mode client|bridge] [--seed N] [--metrics-addr HOST:PORT]

Forwards TCP byte-for-byte and applies the trained padding policy causally:
the bridge shim injects generator-scheduled downstream dummy frames, the
client shim keeps the upload rate at the configured ratio. Dummy frames are
stripped at the peer shim.`;

export async function main(argv: string[]): Promise<number> {
  let values;
  try {
    ({ values } = parseArgs({
      args: argv,
      options: {
        listen: { type: "string" },
        upstream: { type: "string" },
        weights: { type: "string" },
        mode: { type: "string", default: "bridge" },
        seed: { type: "string", default: "0" },
        "metrics-addr": { type: "string" },
        help: { type: "boolean", default: false },
      },
      strict: true,
    }));
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    console.error(USAGE);
    return 2;
  }
  if (values.help) {
    console.log(USAGE);
    return 0;
  }
  for (const required of ["listen", "upstream", "weights"] as const) {
    if (!values[required]) {
      console.error(`missing required flag --${required}`);
      console.error(USAGE);
      return 2;
    }
  }
  if (values.mode !== "client" && values.mode !== "bridge") {
    console.error(`--mode must be 'client' or 'bridge', got '${values.mode}'`);
    return 2;
  }
  const seed = Number(values.seed);
  if (!Number.isInteger(seed)) {
    console.error(`--seed must be an integer, got '${values.seed}'`);
    return 2;
  }

  try {
    const proxy = await startProxy({
      listen: parseAddr(values.listen!),
      upstream: parseAddr(values.upstream!),
      weights: values.weights!,
      mode: values.mode,
      seed,
      metricsAddr: values["metrics-addr"]
        ? parseAddr(values["metrics-addr"])
        : undefined,
    });
    const addr = proxy.address();
    console.log(
      `padproxy (${values.mode}) listening on ${addr.host}:${addr.port}, ` +
        `upstream ${values.upstream}, N=${proxy.policy.nDownload}, ` +
        `Z=${proxy.policy.liveNormZ.toFixed(3)}`,
    );
    const metrics = proxy.metricsAddress();
    if (metrics) {
      console.log(`metrics at http://${metrics.host}:${metrics.port}/metrics`);
    }
    await new Promise<void>((resolve) => {
      process.once("SIGINT", resolve);
      process.once("SIGTERM", resolve);
    });
    await proxy.close();
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
