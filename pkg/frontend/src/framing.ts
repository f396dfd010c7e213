/**
 * Shim-level framing between the two proxy endpoints.
 *
 * Wire format: 4-byte big-endian length, then `length` bytes of payload;
 * the first payload byte is the frame type, the rest is data.  REAL frames
 * carry application bytes (chunked to one cell-equivalent per frame); DUMMY
 * frames carry 514 random bytes and are stripped at the peer shim, so
 * removing them reconstructs the exact real stream.
 */

export const FrameType = {
  REAL: 0,
  DUMMY: 1,
} as const;
export type FrameTypeValue = (typeof FrameType)[keyof typeof FrameType];

/** One Tor-cell equivalent; dummy payload size and real chunking unit. */
export const CELL_SIZE = 514;

/** Frames are small by construction; anything bigger is protocol corruption. */
export const MAX_FRAME_LEN = 64 * 1024;

export class FramingError extends Error {}

export interface Frame {
  type: FrameTypeValue;
  data: Buffer;
}

export function encodeFrame(type: FrameTypeValue, data: Buffer): Buffer {
  const header = Buffer.alloc(5);
  header.writeUInt32BE(1 + data.length, 0);
  header.writeUInt8(type, 4);
  return Buffer.concat([header, data]);
}

/** Split a raw chunk into REAL frames of at most one cell each. */
export function encodeRealChunk(data: Buffer): Buffer {
  const parts: Buffer[] = [];
  for (let off = 0; off < data.length; off += CELL_SIZE) {
    parts.push(
      encodeFrame(FrameType.REAL, data.subarray(off, off + CELL_SIZE)),
    );
  }
  return Buffer.concat(parts);
}

export function encodeDummyFrame(randomBytes: (n: number) => Buffer): Buffer {
  return encodeFrame(FrameType.DUMMY, randomBytes(CELL_SIZE));
}

/** Incremental parser over a framed byte stream. */
export class FrameParser {
  private pending: Buffer = Buffer.alloc(0);

  push(chunk: Buffer): Frame[] {
    this.pending = this.pending.length
      ? Buffer.concat([this.pending, chunk])
      : chunk;
    const frames: Frame[] = [];
    for (;;) {
      if (this.pending.length < 4) break;
      const len = this.pending.readUInt32BE(0);
      if (len === 0 || len > MAX_FRAME_LEN) {
        throw new FramingError(`invalid frame length ${len}`);
      }
      if (this.pending.length < 4 + len) break;
      const type = this.pending.readUInt8(4);
      if (type !== FrameType.REAL && type !== FrameType.DUMMY) {
        throw new FramingError(`unknown frame type ${type}`);
      }
      frames.push({
        type: type as FrameTypeValue,
        data: this.pending.subarray(5, 4 + len),
      });
      this.pending = this.pending.subarray(4 + len);
    }
    return frames;
  }
}
