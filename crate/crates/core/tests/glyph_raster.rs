use glyphforge_core::glyph::{rasterize, to_depth, to_scribble, FontLibrary, DEFAULT_FONT};
use ndarray::Array2;

const BOX_FONT: &str = "GlyphForgeBox.ttf";

/// Reference ink fractions from an independent rasterizer (FreeType via Pillow) with
/// the same layout rule: fit the ink box into the 8% margins, center, binarize at 0.5.
const REFERENCE: [(&str, &str, f64); 5] = [
    ("rose", DEFAULT_FONT, 0.0786),
    ("O", DEFAULT_FONT, 0.2312),
    ("snow", DEFAULT_FONT, 0.0601),
    ("a", DEFAULT_FONT, 0.2904),
    // Outer square 0.8 of the em, inner counter 0.4: 0.64 · 430² / 512².
    ("口", BOX_FONT, 0.4514),
];

/// Number of 4-connected background components.
fn background_components(px: &Array2<f64>) -> usize {
    let (h, w) = px.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[[r0, c0]] || px[[r0, c0]] > 0.0 {
                continue;
            }
            count += 1;
            seen[[r0, c0]] = true;
            let mut stack = vec![(r0, c0)];
            while let Some((r, c)) = stack.pop() {
                let next = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in next {
                    if nr < h && nc < w && !seen[[nr, nc]] && px[[nr, nc]] == 0.0 {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    count
}

#[test]
fn ink_fractions_match_reference_rasterizer() {
    let fonts = FontLibrary::default();
    for (text, font, expect) in REFERENCE {
        let g = rasterize(text, font, 512, &fonts).unwrap();
        let got = g.ink_fraction();
        assert!(got > 0.02 && got < 0.5, "{text}: {got}");
        assert!((got - expect).abs() < 0.005, "{text}: {got} vs reference {expect}");
    }
}

#[test]
fn closed_box_has_inside_and_outside() {
    let g = rasterize("口", BOX_FONT, 512, &FontLibrary::default()).unwrap();
    assert!(background_components(&g.pixels) >= 2);
    let o = rasterize("O", DEFAULT_FONT, 256, &FontLibrary::default()).unwrap();
    assert_eq!(background_components(&o.pixels), 2);
    let c = rasterize("c", DEFAULT_FONT, 256, &FontLibrary::default()).unwrap();
    assert_eq!(background_components(&c.pixels), 1);
}

#[test]
fn rasterization_is_deterministic_and_canonical() {
    let fonts = FontLibrary::default();
    let a = rasterize("rose", DEFAULT_FONT, 512, &fonts).unwrap();
    let b = rasterize("rose", DEFAULT_FONT, 512, &fonts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pixels.dim(), (512, 512));
    assert!(a.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
    // Depth and scribble keep exactly the ink support.
    for ctrl in [to_depth(&a.pixels), to_scribble(&a.pixels)] {
        assert!(ctrl
            .image
            .iter()
            .zip(a.pixels.iter())
            .all(|(&c, &p)| (c > 0.0) == (p == 1.0)));
    }
}

#[test]
fn ink_is_centered() {
    let g = rasterize("口", BOX_FONT, 512, &FontLibrary::default()).unwrap();
    let (mut rs, mut cs, mut n) = (0.0, 0.0, 0.0);
    for ((r, c), &v) in g.pixels.indexed_iter() {
        if v > 0.0 {
            rs += r as f64 + 0.5;
            cs += c as f64 + 0.5;
            n += 1.0;
        }
    }
    assert!((rs / n - 256.0).abs() < 1.0 && (cs / n - 256.0).abs() < 1.0);
}
