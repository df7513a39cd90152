// Canvas <-> image coordinate mapping. The slice is drawn scaled to fit the
// canvas; the box is sent to the server in image pixel coordinates.

export interface Box {
  x0: number
  y0: number
  x1: number
  y1: number
}

export interface ViewTransform {
  scale: number // image pixels -> canvas pixels
  imageW: number
  imageH: number
}

export function fitScale(imageW: number, imageH: number, maxW: number, maxH: number): ViewTransform {
  const scale = Math.min(maxW / imageW, maxH / imageH)
  return { scale, imageW, imageH }
}

export function canvasToImage(t: ViewTransform, cx: number, cy: number): [number, number] {
  return [cx / t.scale, cy / t.scale]
}

export function imageToCanvas(t: ViewTransform, ix: number, iy: number): [number, number] {
  return [ix * t.scale, iy * t.scale]
}

/** Drag endpoints (any direction) -> normalized integer half-open box, clamped. */
export function normalizeBox(t: ViewTransform, ax: number, ay: number, bx: number, by: number): Box {
  const [ix0, iy0] = canvasToImage(t, Math.min(ax, bx), Math.min(ay, by))
  const [ix1, iy1] = canvasToImage(t, Math.max(ax, bx), Math.max(ay, by))
  const x0 = Math.max(0, Math.min(t.imageW - 1, Math.floor(ix0)))
  const y0 = Math.max(0, Math.min(t.imageH - 1, Math.floor(iy0)))
  const x1 = Math.max(x0 + 1, Math.min(t.imageW, Math.ceil(ix1)))
  const y1 = Math.max(y0 + 1, Math.min(t.imageH, Math.ceil(iy1)))
  return { x0, y0, x1, y1 }
}

export function boxArea(box: Box): number {
  return (box.x1 - box.x0) * (box.y1 - box.y0)
}
