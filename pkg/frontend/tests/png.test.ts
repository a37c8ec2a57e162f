import { describe, expect, it } from "vitest";
import { adler32, crc32, decodeGrayPng, encodeGrayPng } from "../src/png.js";

const ascii = (s: string) => new Uint8Array([...s].map((c) => c.charCodeAt(0)));

describe("checksums", () => {
  it("crc32 matches the standard check value", () => {
    // the canonical CRC-32 test vector
    expect(crc32(ascii("123456789"))).toBe(0xcbf43926);
  });

  it("crc32 of the empty buffer is 0", () => {
    expect(crc32(new Uint8Array(0))).toBe(0);
  });

  it("adler32 matches the published example", () => {
    // worked example from the Adler-32 definition
    expect(adler32(ascii("Wikipedia"))).toBe(0x11e60398);
  });

  it("adler32 of the empty buffer is 1", () => {
    expect(adler32(new Uint8Array(0))).toBe(1);
  });
});

describe("grayscale png", () => {
  it("starts with the png signature and an IHDR describing the raster", () => {
    const png = encodeGrayPng(32, 32, new Uint8Array(32 * 32));
    expect([...png.subarray(0, 8)]).toEqual([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
    const view = new DataView(png.buffer, png.byteOffset);
    expect(view.getUint32(8)).toBe(13); // IHDR length
    expect(String.fromCharCode(...png.subarray(12, 16))).toBe("IHDR");
    expect(view.getUint32(16)).toBe(32); // width
    expect(view.getUint32(20)).toBe(32); // height
    expect(png[24]).toBe(8); // bit depth
    expect(png[25]).toBe(0); // grayscale
  });

  it("round-trips pixel data exactly", () => {
    const pixels = new Uint8Array(16 * 16);
    for (let i = 0; i < pixels.length; i++) pixels[i] = (i * 37) % 256;
    const decoded = decodeGrayPng(encodeGrayPng(16, 16, pixels));
    expect(decoded.width).toBe(16);
    expect(decoded.height).toBe(16);
    expect([...decoded.pixels]).toEqual([...pixels]);
  });

  it("round-trips images larger than one deflate stored block", () => {
    // 300x300 scanlines are ~90 KB of raw data, forcing multiple 64 KB blocks
    const pixels = new Uint8Array(300 * 300);
    for (let i = 0; i < pixels.length; i++) pixels[i] = (i * 11 + 3) % 256;
    const decoded = decodeGrayPng(encodeGrayPng(300, 300, pixels));
    expect([...decoded.pixels]).toEqual([...pixels]);
  });

  it("every chunk carries a valid crc", () => {
    const png = encodeGrayPng(8, 4, new Uint8Array(32).fill(200));
    const view = new DataView(png.buffer, png.byteOffset);
    let off = 8;
    const seen: string[] = [];
    while (off < png.length) {
      const len = view.getUint32(off);
      seen.push(String.fromCharCode(...png.subarray(off + 4, off + 8)));
      const body = png.subarray(off + 4, off + 8 + len);
      expect(view.getUint32(off + 8 + len)).toBe(crc32(body));
      off += 12 + len;
    }
    expect(seen).toEqual(["IHDR", "IDAT", "IEND"]);
  });

  it("rejects a mis-sized pixel buffer", () => {
    expect(() => encodeGrayPng(4, 4, new Uint8Array(15))).toThrow(/expected 16/);
  });
});
