// Hand-rolled base64 so encode/decode behave identically in the browser and
// under node (atob chokes on large strings in some engines, Buffer is
// node-only).

const ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

const REVERSE = (() => {
  const table = new Int16Array(128).fill(-1);
  for (let i = 0; i < ALPHABET.length; i++) table[ALPHABET.charCodeAt(i)] = i;
  return table;
})();

export function toBase64(bytes: Uint8Array): string {
  const parts: string[] = [];
  for (let i = 0; i < bytes.length; i += 3) {
    const a = bytes[i];
    const b = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const c = i + 2 < bytes.length ? bytes[i + 2] : 0;
    const triple = (a << 16) | (b << 8) | c;
    parts.push(
      ALPHABET[(triple >> 18) & 63],
      ALPHABET[(triple >> 12) & 63],
      i + 1 < bytes.length ? ALPHABET[(triple >> 6) & 63] : "=",
      i + 2 < bytes.length ? ALPHABET[triple & 63] : "=",
    );
  }
  return parts.join("");
}

export function fromBase64(text: string): Uint8Array {
  const clean = text.replace(/[\s]/g, "");
  let effective = clean.length;
  while (effective > 0 && clean[effective - 1] === "=") effective--;
  const out = new Uint8Array(Math.floor((effective * 3) / 4));
  let at = 0;
  let buffer = 0;
  let bits = 0;
  for (let i = 0; i < effective; i++) {
    const code = clean.charCodeAt(i);
    const value = code < 128 ? REVERSE[code] : -1;
    if (value < 0) throw new Error(`invalid base64 character at index ${i}`);
    buffer = (buffer << 6) | value;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out[at++] = (buffer >> bits) & 0xff;
    }
  }
  return out;
}
