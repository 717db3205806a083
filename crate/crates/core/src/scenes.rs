//! Procedural clean scenes for synthetic training data: a sky-to-ground
//! gradient with random rectangles, discs and striped patches.

use rand::Rng;

use crate::image::Image;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { top: f64, left: f64, h: f64, w: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    Stripes { top: f64, left: f64, h: f64, w: f64, period: f64, angle: f64 },
}

fn colour<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

pub fn procedural_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let (h, w) = (height as f64, width as f64);
    let sky = colour(rng).map(|c| 0.5 + 0.5 * c);
    let ground = colour(rng).map(|c| 0.6 * c);
    let horizon = rng.random_range(0.3..0.7) * h;
    let count = rng.random_range(4..=9);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let top = rng.random_range(0.0..h);
            let left = rng.random_range(0.0..w);
            let sh = rng.random_range(0.1..0.5) * h;
            let sw = rng.random_range(0.1..0.5) * w;
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rect { top, left, h: sh, w: sw },
                1 => Shape::Disc { cy: top, cx: left, r: 0.5 * sh.min(sw) },
                _ => Shape::Stripes {
                    top,
                    left,
                    h: sh,
                    w: sw,
                    period: rng.random_range(3.0..9.0),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                },
            };
            (shape, colour(rng))
        })
        .collect();
    Image::from_fn(height, width, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = if yf < horizon {
            sky[c] * (0.8 + 0.2 * yf / horizon)
        } else {
            ground[c] * (0.7 + 0.3 * (yf - horizon) / (h - horizon).max(1.0))
        };
        for (shape, col) in &shapes {
            match *shape {
                Shape::Rect { top, left, h, w } => {
                    if yf >= top && yf < top + h && xf >= left && xf < left + w {
                        v = col[c];
                    }
                }
                Shape::Disc { cy, cx, r } => {
                    if (yf - cy).powi(2) + (xf - cx).powi(2) < r * r {
                        v = col[c];
                    }
                }
                Shape::Stripes { top, left, h, w, period, angle } => {
                    if yf >= top && yf < top + h && xf >= left && xf < left + w {
                        let t = (xf * angle.cos() + yf * angle.sin()) * std::f64::consts::TAU / period;
                        v = col[c] * (0.6 + 0.4 * t.sin());
                    }
                }
            }
        }
        v
    })
}
