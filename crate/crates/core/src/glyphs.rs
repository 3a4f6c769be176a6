//! Silhouette templates for the object vocabulary and the bitmap font used
//! for sign objects.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::vocab::{object_category, ObjectCategory};

/// Binary silhouette, trimmed so every border row and column has a set cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub width: usize,
    pub height: usize,
    cells: Vec<bool>,
}

impl Template {
    fn from_rows(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut cells = vec![false; width * height];
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                cells[y * width + x] = ch == '#';
            }
        }
        Self {
            width,
            height,
            cells,
        }
        .trimmed()
    }

    fn trimmed(self) -> Self {
        let rows: Vec<usize> = (0..self.height)
            .filter(|&y| (0..self.width).any(|x| self.get(y, x)))
            .collect();
        let cols: Vec<usize> = (0..self.width)
            .filter(|&x| (0..self.height).any(|y| self.get(y, x)))
            .collect();
        let (y0, y1) = (rows[0], rows[rows.len() - 1] + 1);
        let (x0, x1) = (cols[0], cols[cols.len() - 1] + 1);
        let mut cells = Vec::with_capacity((y1 - y0) * (x1 - x0));
        for y in y0..y1 {
            for x in x0..x1 {
                cells.push(self.get(y, x));
            }
        }
        Self {
            width: x1 - x0,
            height: y1 - y0,
            cells,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// Natural width / height ratio.
    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Nearest-neighbour lookup for a pixel of a `w x h` rendering.
    #[inline]
    pub fn sample(&self, py: usize, px: usize, h: usize, w: usize) -> bool {
        self.get(py * self.height / h, px * self.width / w)
    }

    /// Fraction of cells that agree with a `w x h` binary raster after
    /// mapping each raster pixel back to the cell it was rendered from.
    pub fn agreement(&self, raster: &[bool], h: usize, w: usize) -> f64 {
        let mut fill = vec![0u32; self.cells.len()];
        let mut total = vec![0u32; self.cells.len()];
        for py in 0..h {
            for px in 0..w {
                let cell = (py * self.height / h) * self.width + px * self.width / w;
                total[cell] += 1;
                fill[cell] += raster[py * w + px] as u32;
            }
        }
        let agree = self
            .cells
            .iter()
            .enumerate()
            .filter(|(i, &on)| {
                // cells with no pixels (raster smaller than template) count as mismatches
                total[*i] > 0 && ((2 * fill[*i] > total[*i]) == on)
            })
            .count();
        agree as f64 / self.cells.len() as f64
    }
}

const GLYPHS: &[(&str, [&str; 8])] = &[
    ("cat", ["#......#", "##....##", "########", "##.##.##", "########", "########", ".######.", "..####.."]),
    ("cup", ["########", "######.#", "######.#", "######.#", "########", "######..", ".####...", "..##...."]),
    ("tree", ["...##...", "..####..", ".######.", "########", ".######.", "...##...", "...##...", "..####.."]),
    ("car", ["........", "..####..", ".##..##.", "########", "########", "########", ".##..##.", "........"]),
    ("house", ["...##...", "..####..", ".######.", "########", "##.##.##", "##.##.##", "########", "########"]),
    ("fish", ["........", ".....#..", "#..####.", "##.#####", "########", "##.#####", "#..####.", ".....#.."]),
    ("anchor", ["...##...", "..#..#..", "...##...", "...##...", "#..##..#", "##.##.##", ".######.", "..####.."]),
    ("cactus", ["...##...", "...##.#.", "#..##.#.", "#..####.", "####....", "...##...", "...##...", "...##..."]),
    ("crown", ["#..##..#", "#..##..#", "##.##.##", "########", "########", "########", "........", "........"]),
    ("kite", ["...#....", "..###...", ".#####..", "#######.", ".#####..", "..###...", "...#....", "....#..."]),
    ("key", [".###....", "#...#...", "#...####", "#...#.#.", ".###..#.", "........", "........", "........"]),
    ("bell", ["...##...", "..####..", ".######.", ".######.", ".######.", "########", "...##...", "........"]),
];

const FONT: &[(char, [&str; 5])] = &[
    ('O', ["###", "#.#", "#.#", "#.#", "###"]),
    ('K', ["#.#", "#.#", "##.", "#.#", "#.#"]),
    ('H', ["#.#", "#.#", "###", "#.#", "#.#"]),
    ('I', ["###", ".#.", ".#.", ".#.", "###"]),
    ('G', ["###", "#..", "#.#", "#.#", "###"]),
    ('Z', ["###", "..#", ".#.", "#..", "###"]),
    ('A', [".#.", "#.#", "###", "#.#", "#.#"]),
    ('P', ["##.", "#.#", "##.", "#..", "#.."]),
    ('Y', ["#.#", "#.#", ".#.", ".#.", ".#."]),
    ('E', ["###", "#..", "###", "#..", "###"]),
    ('S', ["###", "#..", "###", "..#", "###"]),
    ('M', ["#.#", "###", "###", "#.#", "#.#"]),
    ('N', ["##.", "#.#", "#.#", "#.#", "#.#"]),
];

/// Sign silhouette: the string in the 3x5 font, one blank column between
/// letters, sitting on a baseline bar that joins it into one component.
fn sign_template(text: &str) -> Option<Template> {
    let letters: Vec<&[&str; 5]> = text
        .chars()
        .map(|c| FONT.iter().find(|(f, _)| *f == c).map(|(_, g)| g))
        .collect::<Option<_>>()?;
    let width = letters.len() * 4 - 1;
    let mut rows = vec![String::new(); 6];
    for (i, glyph) in letters.iter().enumerate() {
        for (r, row) in glyph.iter().enumerate() {
            rows[r].push_str(row);
            if i + 1 < letters.len() {
                rows[r].push('.');
            }
        }
    }
    rows[5] = "#".repeat(width);
    let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    Some(Template::from_rows(&refs))
}

fn registry() -> &'static HashMap<&'static str, Template> {
    static REGISTRY: OnceLock<HashMap<&'static str, Template>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: HashMap<&'static str, Template> = GLYPHS
            .iter()
            .map(|(name, rows)| (*name, Template::from_rows(rows)))
            .collect();
        for &text in ObjectCategory::TextRendering.objects() {
            map.insert(text, sign_template(text).expect("font covers sign vocabulary"));
        }
        map
    })
}

pub fn template(object: &str) -> Option<&'static Template> {
    registry().get(object)
}

/// All object names with a template, in vocabulary order.
pub fn all_objects() -> impl Iterator<Item = (&'static str, &'static Template)> {
    ObjectCategory::ALL.into_iter().flat_map(|c| {
        c.objects()
            .iter()
            .map(|&o| (o, template(o).expect("every vocabulary object has a template")))
    })
}

pub fn is_known_object(object: &str) -> bool {
    object_category(object).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components(t: &Template) -> usize {
        let mut seen = vec![false; t.width * t.height];
        let mut n = 0;
        for start in 0..seen.len() {
            if seen[start] || !t.cells[start] {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / t.width) as i64, (i % t.width) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= t.height as i64 || nx >= t.width as i64 {
                            continue;
                        }
                        let j = ny as usize * t.width + nx as usize;
                        if t.cells[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn every_template_is_one_component() {
        for (name, t) in all_objects() {
            assert_eq!(components(t), 1, "{name} is not 8-connected");
        }
    }

    #[test]
    fn templates_are_mutually_distinguishable() {
        let all: Vec<_> = all_objects().collect();
        for (a, ta) in &all {
            let raster: Vec<bool> = ta.cells.clone();
            assert_eq!(ta.agreement(&raster, ta.height, ta.width), 1.0);
            for (b, tb) in &all {
                if a != b {
                    let score = tb.agreement(&raster, ta.height, ta.width);
                    assert!(score < 0.9, "{a} looks like {b}: {score}");
                }
            }
        }
    }

    #[test]
    fn stretched_rendering_inverts_exactly() {
        let t = template("cat").unwrap();
        let (h, w) = (11, 19);
        let raster: Vec<bool> = (0..h * w).map(|i| t.sample(i / w, i % w, h, w)).collect();
        assert_eq!(t.agreement(&raster, h, w), 1.0);
    }

    #[test]
    fn sign_dimensions() {
        let t = template("MOON").unwrap();
        assert_eq!((t.width, t.height), (15, 6));
    }
}
