//! Built-in vector-stroke alphabet.
//!
//! Glyphs live in a unit box (x right, y down). A pixel belongs to a glyph
//! when its centre is within half the stroke width of any stroke.

use crate::recognizer::{SymbolTable, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stroke {
    Line {
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
    },
    /// Elliptical arc, angles in degrees, `y = cy + ry * sin(a)` (so 90 points down).
    Arc {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        from: f32,
        to: f32,
    },
}

const fn line(x0: f32, y0: f32, x1: f32, y1: f32) -> Stroke {
    Stroke::Line { x0, y0, x1, y1 }
}

const fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32) -> Stroke {
    Stroke::Arc {
        cx,
        cy,
        rx,
        ry,
        from,
        to,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glyph {
    pub name: char,
    /// Width over height.
    pub aspect: f32,
    pub strokes: &'static [Stroke],
}

pub const ALPHABET: &[Glyph] = &[
    Glyph {
        name: 'A',
        aspect: 0.75,
        strokes: &[
            line(0.0, 1.0, 0.5, 0.0),
            line(0.5, 0.0, 1.0, 1.0),
            line(0.22, 0.6, 0.78, 0.6),
        ],
    },
    Glyph {
        name: 'C',
        aspect: 0.75,
        strokes: &[arc(0.5, 0.5, 0.5, 0.5, 40.0, 320.0)],
    },
    Glyph {
        name: 'D',
        aspect: 0.75,
        strokes: &[
            line(0.0, 0.0, 0.0, 1.0),
            line(0.0, 0.0, 0.4, 0.0),
            line(0.0, 1.0, 0.4, 1.0),
            arc(0.4, 0.5, 0.6, 0.5, -90.0, 90.0),
        ],
    },
    Glyph {
        name: 'E',
        aspect: 0.6,
        strokes: &[
            line(0.0, 0.0, 0.0, 1.0),
            line(0.0, 0.0, 1.0, 0.0),
            line(0.0, 0.5, 0.8, 0.5),
            line(0.0, 1.0, 1.0, 1.0),
        ],
    },
    Glyph {
        name: 'F',
        aspect: 0.6,
        strokes: &[
            line(0.0, 0.0, 0.0, 1.0),
            line(0.0, 0.0, 1.0, 0.0),
            line(0.0, 0.5, 0.8, 0.5),
        ],
    },
    Glyph {
        name: 'H',
        aspect: 0.7,
        strokes: &[
            line(0.0, 0.0, 0.0, 1.0),
            line(1.0, 0.0, 1.0, 1.0),
            line(0.0, 0.5, 1.0, 0.5),
        ],
    },
    Glyph {
        name: 'I',
        aspect: 0.2,
        strokes: &[line(0.5, 0.0, 0.5, 1.0)],
    },
    Glyph {
        name: 'K',
        aspect: 0.65,
        strokes: &[
            line(0.0, 0.0, 0.0, 1.0),
            line(1.0, 0.0, 0.0, 0.6),
            line(0.3, 0.42, 1.0, 1.0),
        ],
    },
    Glyph {
        name: 'L',
        aspect: 0.55,
        strokes: &[line(0.0, 0.0, 0.0, 1.0), line(0.0, 1.0, 1.0, 1.0)],
    },
    Glyph {
        name: 'N',
        aspect: 0.7,
        strokes: &[
            line(0.0, 1.0, 0.0, 0.0),
            line(0.0, 0.0, 1.0, 1.0),
            line(1.0, 1.0, 1.0, 0.0),
        ],
    },
    Glyph {
        name: 'O',
        aspect: 0.8,
        strokes: &[arc(0.5, 0.5, 0.5, 0.5, 0.0, 360.0)],
    },
    Glyph {
        name: 'T',
        aspect: 0.7,
        strokes: &[line(0.0, 0.0, 1.0, 0.0), line(0.5, 0.0, 0.5, 1.0)],
    },
    Glyph {
        name: 'U',
        aspect: 0.7,
        strokes: &[
            line(0.0, 0.0, 0.0, 0.6),
            line(1.0, 0.0, 1.0, 0.6),
            arc(0.5, 0.6, 0.5, 0.4, 0.0, 180.0),
        ],
    },
    Glyph {
        name: 'V',
        aspect: 0.75,
        strokes: &[line(0.0, 0.0, 0.5, 1.0), line(0.5, 1.0, 1.0, 0.0)],
    },
    Glyph {
        name: 'X',
        aspect: 0.75,
        strokes: &[line(0.0, 0.0, 1.0, 1.0), line(1.0, 0.0, 0.0, 1.0)],
    },
    Glyph {
        name: 'Z',
        aspect: 0.7,
        strokes: &[
            line(0.0, 0.0, 1.0, 0.0),
            line(1.0, 0.0, 0.0, 1.0),
            line(0.0, 1.0, 1.0, 1.0),
        ],
    },
];

/// Glyphs with an enclosed or nearly enclosed counter.
pub const RING_GLYPHS: [char; 3] = ['C', 'O', 'D'];

/// Number of recognizer classes needed to cover the alphabet.
pub fn class_count() -> usize {
    RESERVED + ALPHABET.len()
}

/// The alphabet as a recognizer symbol table.
pub fn symbol_table() -> SymbolTable {
    SymbolTable::new(ALPHABET.iter().map(|g| g.name).collect()).expect("alphabet names are unique")
}

pub fn symbol_of(name: char) -> Option<usize> {
    ALPHABET
        .iter()
        .position(|g| g.name == name)
        .map(|i| i + RESERVED)
}

pub fn glyph(symbol: usize) -> Option<&'static Glyph> {
    symbol.checked_sub(RESERVED).and_then(|i| ALPHABET.get(i))
}

pub fn name_of(symbol: usize) -> Option<char> {
    glyph(symbol).map(|g| g.name)
}

fn segment_distance(px: f32, py: f32, (ax, ay): (f32, f32), (bx, by): (f32, f32)) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

impl Glyph {
    /// Stroke polylines in pixel coordinates of a `h x w` box.
    fn polylines(&self, h: usize, w: usize, stroke: f32) -> Vec<Vec<(f32, f32)>> {
        let inset = stroke / 2.0;
        let sx = (w as f32 - 1.0 - 2.0 * inset).max(0.0);
        let sy = (h as f32 - 1.0 - 2.0 * inset).max(0.0);
        let map = |u: f32, v: f32| (inset + u * sx, inset + v * sy);
        self.strokes
            .iter()
            .map(|s| match *s {
                Stroke::Line { x0, y0, x1, y1 } => vec![map(x0, y0), map(x1, y1)],
                Stroke::Arc {
                    cx,
                    cy,
                    rx,
                    ry,
                    from,
                    to,
                } => {
                    let steps = (((to - from).abs() / 7.5).ceil() as usize).max(2);
                    (0..=steps)
                        .map(|i| {
                            let a = (from + (to - from) * i as f32 / steps as f32).to_radians();
                            map(cx + rx * a.cos(), cy + ry * a.sin())
                        })
                        .collect()
                }
            })
            .collect()
    }

    /// Row-major `h x w` coverage of the glyph drawn with the given stroke width.
    pub fn rasterize(&self, h: usize, w: usize, stroke: f32) -> Vec<bool> {
        let lines = self.polylines(h, w, stroke);
        let half = stroke / 2.0;
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32, y as f32);
                out[y * w + x] = lines.iter().any(|pl| {
                    pl.windows(2)
                        .any(|s| segment_distance(px, py, s[0], s[1]) <= half)
                });
            }
        }
        out
    }
}
