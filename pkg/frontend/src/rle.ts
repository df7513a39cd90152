// Run-length decoding matching the service wire format: counts alternate
// background/foreground runs over row-major order, starting with background.

export interface RlePayload {
  counts: number[]
  shape: number[]
}

export function rleDecode(payload: RlePayload): Uint8Array {
  const [h, w] = payload.shape
  const total = h * w
  const sum = payload.counts.reduce((a, b) => a + b, 0)
  if (sum !== total) {
    throw new Error(`RLE counts sum ${sum} != ${total} pixels`)
  }
  const out = new Uint8Array(total)
  let pos = 0
  let value = 0
  for (const count of payload.counts) {
    if (value === 1) out.fill(1, pos, pos + count)
    pos += count
    value ^= 1
  }
  return out
}

export function rleForeground(payload: RlePayload): number {
  let total = 0
  for (let i = 1; i < payload.counts.length; i += 2) total += payload.counts[i]
  return total
}
