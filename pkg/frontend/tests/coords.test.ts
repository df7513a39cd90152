import { describe, expect, it } from 'vitest'

import { boxArea, canvasToImage, fitScale, imageToCanvas, normalizeBox } from '../src/coords.js'

describe('coordinate mapping', () => {
  it('fits the longer image edge into the viewport', () => {
    const t = fitScale(512, 256, 640, 640)
    expect(t.scale).toBeCloseTo(1.25)
    expect(fitScale(100, 400, 640, 640).scale).toBeCloseTo(1.6)
  })

  it('round-trips pixels within half a pixel', () => {
    const t = fitScale(300, 200, 640, 640)
    for (const [x, y] of [[0, 0], [299, 199], [150.5, 99.5], [17, 123]]) {
      const [cx, cy] = imageToCanvas(t, x, y)
      const [ix, iy] = canvasToImage(t, cx, cy)
      expect(Math.abs(ix - x)).toBeLessThanOrEqual(0.5)
      expect(Math.abs(iy - y)).toBeLessThanOrEqual(0.5)
    }
  })

  it('normalizes a reversed drag into min/max order', () => {
    const t = fitScale(100, 100, 100, 100) // identity scale
    const box = normalizeBox(t, 80, 70, 20, 10)
    expect(box).toEqual({ x0: 20, y0: 10, x1: 80, y1: 70 })
  })

  it('clamps to the image extent and keeps min < max', () => {
    const t = fitScale(50, 40, 100, 100) // scale 2
    const box = normalizeBox(t, -10, -10, 500, 500)
    expect(box).toEqual({ x0: 0, y0: 0, x1: 50, y1: 40 })
    const dot = normalizeBox(t, 30, 30, 30, 30)
    expect(dot.x1).toBeGreaterThan(dot.x0)
    expect(dot.y1).toBeGreaterThan(dot.y0)
  })

  it('computes areas on half-open bounds', () => {
    expect(boxArea({ x0: 1, y0: 2, x1: 4, y1: 6 })).toBe(12)
  })
})
