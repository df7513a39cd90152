// Mask -> RGBA overlay buffers; pure functions so tests run without a DOM.

export interface Rgba {
  r: number
  g: number
  b: number
  a: number // 0..255
}

export const PREDICTION_COLOR: Rgba = { r: 66, g: 133, b: 244, a: 102 } // alpha 0.4
export const REFERENCE_COLOR: Rgba = { r: 52, g: 168, b: 83, a: 102 }

/** Paint mask foreground into a fresh RGBA buffer (length w*h*4). */
export function maskToRgba(
  mask: Uint8Array,
  w: number,
  h: number,
  color: Rgba,
): Uint8ClampedArray<ArrayBuffer> {
  if (mask.length !== w * h) throw new Error(`mask length ${mask.length} != ${w * h}`)
  const buf = new Uint8ClampedArray(new ArrayBuffer(w * h * 4))
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const o = i * 4
      buf[o] = color.r
      buf[o + 1] = color.g
      buf[o + 2] = color.b
      buf[o + 3] = color.a
    }
  }
  return buf
}

export function countForeground(mask: Uint8Array): number {
  let n = 0
  for (let i = 0; i < mask.length; i++) if (mask[i]) n++
  return n
}

/** Foreground pixels painted in an RGBA buffer (non-zero alpha). */
export function countPainted(buf: Uint8ClampedArray): number {
  let n = 0
  for (let i = 3; i < buf.length; i += 4) if (buf[i] > 0) n++
  return n
}
