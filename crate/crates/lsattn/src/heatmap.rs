//! Attention maps rendered at input resolution.

/// Bilinear resampling of a `grid × grid` map to `size × size`, sampling at
/// pixel centers with edge clamping.
pub fn upsample_bilinear(map: &[f64], grid: usize, size: usize) -> Vec<f64> {
    assert_eq!(map.len(), grid * grid, "map is not grid x grid");
    let scale = grid as f64 / size as f64;
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let (r0, r1, fr) = coord(r);
        for c in 0..size {
            let (c0, c1, fc) = coord(c);
            let top = map[r0 * grid + c0] * (1.0 - fc) + map[r0 * grid + c1] * fc;
            let bottom = map[r1 * grid + c0] * (1.0 - fc) + map[r1 * grid + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Min-max scaling to `[0, 255]`; a constant map renders as all zeros.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Equal-weight blend of an image and a heatmap.
pub fn overlay(image: &[u8], heat: &[u8]) -> Vec<u8> {
    image
        .iter()
        .zip(heat)
        .map(|(&a, &b)| ((f64::from(a) + f64::from(b)) * 0.5).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_black() {
        let up = upsample_bilinear(&[0.25; 4], 2, 8);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(normalize(&up), vec![0; 64]);
    }

    #[test]
    fn delta_peak_stays_in_its_cell() {
        let (grid, size) = (8, 32);
        for cell in [0, 9, 27, 63] {
            let mut map = vec![0.01; grid * grid];
            map[cell] = 0.9;
            let img = normalize(&upsample_bilinear(&map, grid, size));
            let best = (0..img.len()).max_by_key(|&i| (img[i], std::cmp::Reverse(i))).unwrap();
            let (r, c) = (best / size, best % size);
            assert_eq!((r * grid / size) * grid + c * grid / size, cell);
            assert_eq!(img[best], 255);
        }
    }

    #[test]
    fn blend_averages() {
        assert_eq!(overlay(&[0, 255, 100], &[255, 255, 50]), vec![128, 255, 75]);
    }
}
