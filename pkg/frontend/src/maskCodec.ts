// PNG encode/decode for mask and image payloads.
//
// The editor's mask layer must survive an export→import round trip bitwise,
// so we control both directions ourselves instead of going through a canvas
// (getImageData is allowed to be lossy about color management, and encoders
// differ byte-for-byte between browsers).  Encoding uses stored deflate
// blocks — deterministic output, no compressor state.  Decoding implements
// enough of RFC 1951/2083 to read anything the editing service sends back:
// 8-bit gray / gray+alpha / RGB / RGBA, all five row filters, stored, fixed
// and dynamic huffman blocks.

export interface DecodedPng {
  width: number;
  height: number;
  channels: number;
  pixels: Uint8Array; // height * width * channels, row-major
}

export interface MaskLayer {
  width: number;
  height: number;
  data: Uint8Array; // strictly 0 | 1
}

const PNG_SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

// ---------------------------------------------------------------------------
// checksums

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

function crc32(bytes: Uint8Array, start: number, end: number): number {
  let crc = 0xffffffff;
  for (let i = start; i < end; i++) {
    crc = CRC_TABLE[(crc ^ bytes[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < bytes.length; i++) {
    a = (a + bytes[i]) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

// ---------------------------------------------------------------------------
// encoding

class ByteWriter {
  private buf = new Uint8Array(1024);
  private len = 0;

  private grow(extra: number) {
    if (this.len + extra <= this.buf.length) return;
    let size = this.buf.length * 2;
    while (size < this.len + extra) size *= 2;
    const next = new Uint8Array(size);
    next.set(this.buf.subarray(0, this.len));
    this.buf = next;
  }

  bytes(data: ArrayLike<number>) {
    this.grow(data.length);
    this.buf.set(data, this.len);
    this.len += data.length;
  }

  u8(v: number) {
    this.grow(1);
    this.buf[this.len++] = v & 0xff;
  }

  u32be(v: number) {
    this.grow(4);
    this.buf[this.len++] = (v >>> 24) & 0xff;
    this.buf[this.len++] = (v >>> 16) & 0xff;
    this.buf[this.len++] = (v >>> 8) & 0xff;
    this.buf[this.len++] = v & 0xff;
  }

  take(): Uint8Array {
    return this.buf.slice(0, this.len);
  }
}

function zlibStored(raw: Uint8Array): Uint8Array {
  const out = new ByteWriter();
  out.u8(0x78); // CM=8, CINFO=7
  out.u8(0x01); // FCHECK making the header a multiple of 31, no dict
  const max = 65535;
  let offset = 0;
  do {
    const size = Math.min(max, raw.length - offset);
    const final = offset + size >= raw.length ? 1 : 0;
    out.u8(final); // BTYPE=00 stored
    out.u8(size & 0xff);
    out.u8((size >>> 8) & 0xff);
    out.u8(~size & 0xff);
    out.u8((~size >>> 8) & 0xff);
    out.bytes(raw.subarray(offset, offset + size));
    offset += size;
  } while (offset < raw.length);
  out.u32be(adler32(raw));
  return out.take();
}

function chunk(out: ByteWriter, type: string, data: Uint8Array) {
  out.u32be(data.length);
  const body = new Uint8Array(4 + data.length);
  for (let i = 0; i < 4; i++) body[i] = type.charCodeAt(i);
  body.set(data, 4);
  out.bytes(body);
  out.u32be(crc32(body, 0, body.length));
}

function encodePng(pixels: Uint8Array, width: number, height: number,
                   channels: 1 | 3): Uint8Array {
  if (pixels.length !== width * height * channels) {
    throw new Error(
      `pixel buffer is ${pixels.length} bytes, expected ${width * height * channels}`,
    );
  }
  const stride = width * channels;
  const raw = new Uint8Array(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    // filter byte 0 (None), then the row verbatim
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const ihdr = new ByteWriter();
  ihdr.u32be(width);
  ihdr.u32be(height);
  ihdr.u8(8); // bit depth
  ihdr.u8(channels === 1 ? 0 : 2); // color type: gray / truecolor
  ihdr.u8(0);
  ihdr.u8(0);
  ihdr.u8(0);

  const out = new ByteWriter();
  out.bytes(PNG_SIGNATURE);
  chunk(out, "IHDR", ihdr.take());
  chunk(out, "IDAT", zlibStored(raw));
  chunk(out, "IEND", new Uint8Array(0));
  return out.take();
}

export function encodeGrayPng(pixels: Uint8Array, width: number,
                              height: number): Uint8Array {
  return encodePng(pixels, width, height, 1);
}

export function encodeRgbPng(pixels: Uint8Array, width: number,
                             height: number): Uint8Array {
  return encodePng(pixels, width, height, 3);
}

/** Export a binary layer as the service's mask format: 8-bit gray, 0/255. */
export function encodeMaskPng(layer: MaskLayer): Uint8Array {
  const gray = new Uint8Array(layer.data.length);
  for (let i = 0; i < layer.data.length; i++) {
    const v = layer.data[i];
    if (v !== 0 && v !== 1) {
      throw new Error(`mask layer is not binary at index ${i} (value ${v})`);
    }
    gray[i] = v === 1 ? 255 : 0;
  }
  return encodeGrayPng(gray, layer.width, layer.height);
}

// ---------------------------------------------------------------------------
// inflate (RFC 1951)

const LENGTH_BASE = [
  3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59,
  67, 83, 99, 115, 131, 163, 195, 227, 258,
];
const LENGTH_EXTRA = [
  0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4,
  5, 5, 5, 5, 0,
];
const DIST_BASE = [
  1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513,
  769, 1025, 1537, 2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577,
];
const DIST_EXTRA = [
  0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10,
  11, 11, 12, 12, 13, 13,
];
const CODE_LENGTH_ORDER = [
  16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15,
];
const MAX_BITS = 15;

class BitReader {
  private pos: number;
  private bitBuf = 0;
  private bitCount = 0;

  constructor(private data: Uint8Array, offset: number) {
    this.pos = offset;
  }

  bits(n: number): number {
    while (this.bitCount < n) {
      if (this.pos >= this.data.length) throw new Error("deflate stream truncated");
      this.bitBuf |= this.data[this.pos++] << this.bitCount;
      this.bitCount += 8;
    }
    const v = this.bitBuf & ((1 << n) - 1);
    this.bitBuf >>>= n;
    this.bitCount -= n;
    return v;
  }

  alignByte() {
    this.bitBuf = 0;
    this.bitCount = 0;
  }

  copyBytes(out: Uint8Array, at: number, n: number) {
    if (this.pos + n > this.data.length) throw new Error("deflate stream truncated");
    out.set(this.data.subarray(this.pos, this.pos + n), at);
    this.pos += n;
  }

  readU16le(): number {
    if (this.pos + 2 > this.data.length) throw new Error("deflate stream truncated");
    const v = this.data[this.pos] | (this.data[this.pos + 1] << 8);
    this.pos += 2;
    return v;
  }
}

interface Huffman {
  count: Int32Array;   // codes per bit length
  symbols: Int32Array; // symbols sorted canonically
}

function buildHuffman(lengths: number[] | Uint8Array): Huffman {
  const count = new Int32Array(MAX_BITS + 1);
  for (let i = 0; i < lengths.length; i++) count[lengths[i]]++;
  count[0] = 0;
  const offsets = new Int32Array(MAX_BITS + 2);
  for (let len = 1; len <= MAX_BITS; len++) {
    offsets[len + 1] = offsets[len] + count[len];
  }
  const symbols = new Int32Array(lengths.length);
  for (let sym = 0; sym < lengths.length; sym++) {
    if (lengths[sym] !== 0) symbols[offsets[lengths[sym]]++] = sym;
  }
  return { count, symbols };
}

function decodeSymbol(reader: BitReader, huff: Huffman): number {
  let code = 0;
  let first = 0;
  let index = 0;
  for (let len = 1; len <= MAX_BITS; len++) {
    code |= reader.bits(1);
    const count = huff.count[len];
    if (code - first < count) return huff.symbols[index + (code - first)];
    index += count;
    first = (first + count) << 1;
    code <<= 1;
  }
  throw new Error("invalid huffman code");
}

const FIXED_LITLEN = (() => {
  const lengths = new Uint8Array(288);
  lengths.fill(8, 0, 144);
  lengths.fill(9, 144, 256);
  lengths.fill(7, 256, 280);
  lengths.fill(8, 280, 288);
  return buildHuffman(lengths);
})();
const FIXED_DIST = buildHuffman(new Uint8Array(30).fill(5));

function readDynamicTables(reader: BitReader): [Huffman, Huffman] {
  const hlit = reader.bits(5) + 257;
  const hdist = reader.bits(5) + 1;
  const hclen = reader.bits(4) + 4;
  const clLengths = new Uint8Array(19);
  for (let i = 0; i < hclen; i++) {
    clLengths[CODE_LENGTH_ORDER[i]] = reader.bits(3);
  }
  const clHuff = buildHuffman(clLengths);
  const lengths = new Uint8Array(hlit + hdist);
  let i = 0;
  while (i < hlit + hdist) {
    const sym = decodeSymbol(reader, clHuff);
    if (sym < 16) {
      lengths[i++] = sym;
    } else if (sym === 16) {
      if (i === 0) throw new Error("repeat with no previous code length");
      const prev = lengths[i - 1];
      let repeat = 3 + reader.bits(2);
      while (repeat--) lengths[i++] = prev;
    } else if (sym === 17) {
      let repeat = 3 + reader.bits(3);
      while (repeat--) lengths[i++] = 0;
    } else {
      let repeat = 11 + reader.bits(7);
      while (repeat--) lengths[i++] = 0;
    }
  }
  if (i > hlit + hdist) throw new Error("code length repeat overflows table");
  return [
    buildHuffman(lengths.subarray(0, hlit)),
    buildHuffman(lengths.subarray(hlit)),
  ];
}

/** Inflate a zlib stream into exactly `expected` bytes. */
export function inflate(data: Uint8Array, expected: number): Uint8Array {
  if (data.length < 2) throw new Error("zlib stream too short");
  if ((data[0] & 0x0f) !== 8) throw new Error("not a deflate stream");
  if (((data[0] << 8) | data[1]) % 31 !== 0) throw new Error("bad zlib header");
  if (data[1] & 0x20) throw new Error("preset dictionaries are not supported");

  const out = new Uint8Array(expected);
  let at = 0;
  const reader = new BitReader(data, 2);
  let final = 0;
  do {
    final = reader.bits(1);
    const type = reader.bits(2);
    if (type === 0) {
      reader.alignByte();
      const len = reader.readU16le();
      const nlen = reader.readU16le();
      if ((len ^ nlen) !== 0xffff) throw new Error("stored block length mismatch");
      if (at + len > expected) throw new Error("inflate output overflows");
      reader.copyBytes(out, at, len);
      at += len;
    } else if (type === 1 || type === 2) {
      const [litlen, dist] =
        type === 1 ? [FIXED_LITLEN, FIXED_DIST] : readDynamicTables(reader);
      for (;;) {
        const sym = decodeSymbol(reader, litlen);
        if (sym < 256) {
          if (at >= expected) throw new Error("inflate output overflows");
          out[at++] = sym;
        } else if (sym === 256) {
          break;
        } else {
          const li = sym - 257;
          if (li >= LENGTH_BASE.length) throw new Error(`bad length code ${sym}`);
          const length = LENGTH_BASE[li] + reader.bits(LENGTH_EXTRA[li]);
          const dsym = decodeSymbol(reader, dist);
          if (dsym >= DIST_BASE.length) throw new Error(`bad distance code ${dsym}`);
          const distance = DIST_BASE[dsym] + reader.bits(DIST_EXTRA[dsym]);
          if (distance > at) throw new Error("distance reaches before stream start");
          if (at + length > expected) throw new Error("inflate output overflows");
          for (let k = 0; k < length; k++, at++) {
            out[at] = out[at - distance];
          }
        }
      }
    } else {
      throw new Error("reserved deflate block type");
    }
  } while (!final);
  if (at !== expected) {
    throw new Error(`inflate produced ${at} bytes, expected ${expected}`);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG decoding

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

function unfilter(raw: Uint8Array, width: number, height: number,
                  channels: number): Uint8Array {
  const stride = width * channels;
  const out = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = y * (stride + 1) + 1;
    const dst = y * stride;
    const prev = dst - stride;
    for (let x = 0; x < stride; x++) {
      const left = x >= channels ? out[dst + x - channels] : 0;
      const up = y > 0 ? out[prev + x] : 0;
      const upLeft = y > 0 && x >= channels ? out[prev + x - channels] : 0;
      const v = raw[row + x];
      let decoded: number;
      switch (filter) {
        case 0: decoded = v; break;
        case 1: decoded = v + left; break;
        case 2: decoded = v + up; break;
        case 3: decoded = v + ((left + up) >> 1); break;
        case 4: decoded = v + paeth(left, up, upLeft); break;
        default: throw new Error(`unknown PNG filter ${filter} on row ${y}`);
      }
      out[dst + x] = decoded & 0xff;
    }
  }
  return out;
}

function readU32be(bytes: Uint8Array, at: number): number {
  return ((bytes[at] << 24) | (bytes[at + 1] << 16) | (bytes[at + 2] << 8) |
          bytes[at + 3]) >>> 0;
}

export function decodePng(bytes: Uint8Array): DecodedPng {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let channels = 0;
  let sawIhdr = false;
  const idatParts: Uint8Array[] = [];
  let at = 8;
  while (at + 8 <= bytes.length) {
    const length = readU32be(bytes, at);
    const type = String.fromCharCode(
      bytes[at + 4], bytes[at + 5], bytes[at + 6], bytes[at + 7]);
    const data = bytes.subarray(at + 8, at + 8 + length);
    if (at + 12 + length > bytes.length) throw new Error("PNG chunk truncated");
    const crc = readU32be(bytes, at + 8 + length);
    if (crc !== crc32(bytes, at + 4, at + 8 + length)) {
      throw new Error(`CRC mismatch in ${type} chunk`);
    }
    if (type === "IHDR") {
      width = readU32be(data, 0);
      height = readU32be(data, 4);
      const bitDepth = data[8];
      const colorType = data[9];
      const interlace = data[12];
      if (bitDepth !== 8) {
        throw new Error(`unsupported bit depth ${bitDepth} (only 8)`);
      }
      const byColorType: Record<number, number> = { 0: 1, 2: 3, 4: 2, 6: 4 };
      if (!(colorType in byColorType)) {
        throw new Error(`unsupported color type ${colorType}`);
      }
      if (interlace !== 0) throw new Error("interlaced PNGs are not supported");
      channels = byColorType[colorType];
      sawIhdr = true;
    } else if (type === "IDAT") {
      idatParts.push(data);
    } else if (type === "IEND") {
      break;
    }
    // ancillary chunks are skipped
    at += 12 + length;
  }
  if (!sawIhdr) throw new Error("PNG has no IHDR chunk");
  if (width <= 0 || height <= 0) throw new Error("empty PNG");
  if (idatParts.length === 0) throw new Error("PNG has no IDAT data");

  let total = 0;
  for (const part of idatParts) total += part.length;
  const compressed = new Uint8Array(total);
  let off = 0;
  for (const part of idatParts) {
    compressed.set(part, off);
    off += part.length;
  }
  const stride = width * channels;
  const raw = inflate(compressed, height * (stride + 1));
  return { width, height, channels, pixels: unfilter(raw, width, height, channels) };
}

/** Decode any supported PNG into a binary layer (first channel ≥ 128). */
export function decodeMaskPng(bytes: Uint8Array): MaskLayer {
  const png = decodePng(bytes);
  const data = new Uint8Array(png.width * png.height);
  for (let i = 0; i < data.length; i++) {
    data[i] = png.pixels[i * png.channels] >= 128 ? 1 : 0;
  }
  return { width: png.width, height: png.height, data };
}
