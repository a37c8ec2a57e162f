// Minimal grayscale PNG writer. The service accepts raw PNG bytes for mask
// uploads, and the mask lives in a plain Uint8Array here, so we encode it
// ourselves instead of bouncing through a canvas (toBlob has no grayscale
// mode and resamples on some browsers). Deflate uses stored (uncompressed)
// blocks: a 32x32 mask is ~1 KB, nothing worth compressing.

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < bytes.length; i++) {
    a = (a + bytes[i]) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function u32be(n: number): Uint8Array {
  return new Uint8Array([(n >>> 24) & 0xff, (n >>> 16) & 0xff, (n >>> 8) & 0xff, n & 0xff]);
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((s, p) => s + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const typeBytes = new Uint8Array([...type].map((ch) => ch.charCodeAt(0)));
  const body = concat([typeBytes, data]);
  return concat([u32be(data.length), body, u32be(crc32(body))]);
}

/** zlib stream around stored deflate blocks (max 65535 bytes each). */
function zlibStored(raw: Uint8Array): Uint8Array {
  const parts: Uint8Array[] = [new Uint8Array([0x78, 0x01])]; // CMF/FLG, no preset dict
  const max = 65535;
  for (let off = 0; off < raw.length || raw.length === 0; off += max) {
    const block = raw.subarray(off, Math.min(off + max, raw.length));
    const final = off + max >= raw.length ? 1 : 0;
    const len = block.length;
    parts.push(new Uint8Array([final, len & 0xff, (len >> 8) & 0xff, ~len & 0xff, (~len >> 8) & 0xff]));
    parts.push(block);
    if (raw.length === 0) break;
  }
  parts.push(u32be(adler32(raw)));
  return concat(parts);
}

/**
 * Encode an 8-bit grayscale image (row-major, length w*h) as a PNG.
 */
export function encodeGrayPng(width: number, height: number, pixels: Uint8Array): Uint8Array {
  if (pixels.length !== width * height) {
    throw new Error(`pixel buffer is ${pixels.length}, expected ${width * height}`);
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32be(width), 0);
  ihdr.set(u32be(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // color type: grayscale
  // compression 0, filter 0, interlace 0 already zeroed

  // scanlines, each prefixed with filter type 0 (None)
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0;
    raw.set(pixels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }

  const signature = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
  return concat([
    signature,
    chunk("IHDR", ihdr),
    chunk("IDAT", zlibStored(raw)),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

/**
 * Decode a PNG produced by encodeGrayPng back to its pixel buffer.
 * Only supports what the encoder emits (8-bit gray, filter 0, stored
 * deflate); used by tests to close the round trip without a browser.
 */
export function decodeGrayPng(bytes: Uint8Array): { width: number; height: number; pixels: Uint8Array } {
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let off = 8; // skip signature
  let width = 0;
  let height = 0;
  const idat: Uint8Array[] = [];
  while (off < bytes.length) {
    const len = view.getUint32(off);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    const data = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = view.getUint32(off + 8);
      height = view.getUint32(off + 12);
      if (bytes[off + 16] !== 8 || bytes[off + 17] !== 0) {
        throw new Error("decodeGrayPng only handles 8-bit grayscale");
      }
    } else if (type === "IDAT") {
      idat.push(data);
    }
    off += 12 + len;
  }
  const z = concat(idat);
  // walk the stored deflate blocks
  const raw = new Uint8Array(height * (width + 1));
  let zo = 2; // skip zlib header
  let ro = 0;
  for (;;) {
    const final = z[zo] & 1;
    const len = z[zo + 1] | (z[zo + 2] << 8);
    raw.set(z.subarray(zo + 5, zo + 5 + len), ro);
    ro += len;
    zo += 5 + len;
    if (final) break;
  }
  const pixels = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    if (raw[y * (width + 1)] !== 0) throw new Error("unexpected scanline filter");
    pixels.set(raw.subarray(y * (width + 1) + 1, (y + 1) * (width + 1)), y * width);
  }
  return { width, height, pixels };
}
