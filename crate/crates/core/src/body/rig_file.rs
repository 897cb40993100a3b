//! Plain-text rig format. See `docs/rig_format.md` for the grammar.

use std::fmt::Write as _;
use std::path::Path;

use super::{BodyError, ModelParts, RomBounds, Skeleton, SkinnedModel};
use crate::math::{Point, Vec3};

struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, Vec<&'a str>)> + 'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, Vec<&'a str>)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
                .filter(|(_, t)| !t.is_empty()),
        );
        Lines { inner: it.peekable() }
    }

    fn next_row(&mut self, what: &str, last_line: usize) -> Result<(usize, Vec<&'a str>), BodyError> {
        self.inner
            .next()
            .ok_or_else(|| BodyError::Parse { line: last_line, message: format!("unexpected end of file while reading {what}") })
    }
}

fn err(line: usize, message: impl Into<String>) -> BodyError {
    BodyError::Parse { line, message: message.into() }
}

fn num<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T, BodyError>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| err(line, format!("cannot parse {tok:?}: {e}")))
}

fn expect_len(line: usize, row: &[&str], n: usize, what: &str) -> Result<(), BodyError> {
    if row.len() != n {
        return Err(err(line, format!("{what} needs {n} fields, got {}", row.len())));
    }
    Ok(())
}

pub fn parse_rig(text: &str) -> Result<SkinnedModel, BodyError> {
    let mut lines = Lines::new(text);
    let mut parents = None;
    let mut offsets = Vec::new();
    let mut vertices = None;
    let mut faces = Vec::new();
    let mut triplets: Vec<(usize, usize, f64, usize)> = Vec::new();
    let mut rom_rows: Vec<(usize, f64, f64, usize)> = Vec::new();
    let mut markers = Vec::new();
    let mut left_hand = Vec::new();
    let mut right_hand = Vec::new();

    while let Some((line, head)) = lines.inner.next() {
        let count = |head: &[&str]| -> Result<usize, BodyError> {
            expect_len(line, head, 2, head[0])?;
            num::<usize>(line, head[1])
        };
        match head[0] {
            "joints" => {
                let n = count(&head)?;
                let mut ps = Vec::with_capacity(n);
                for _ in 0..n {
                    let (l, row) = lines.next_row("joints", line)?;
                    expect_len(l, &row, 4, "joint row")?;
                    let p: i64 = num(l, row[0])?;
                    ps.push(if p < 0 { None } else { Some(p as usize) });
                    offsets.push(Vec3::new(num(l, row[1])?, num(l, row[2])?, num(l, row[3])?));
                }
                parents = Some(ps);
            }
            "vertices" => {
                let n = count(&head)?;
                let mut vs = Vec::with_capacity(n);
                for _ in 0..n {
                    let (l, row) = lines.next_row("vertices", line)?;
                    expect_len(l, &row, 3, "vertex row")?;
                    vs.push(Point::new(num(l, row[0])?, num(l, row[1])?, num(l, row[2])?));
                }
                vertices = Some(vs);
            }
            "faces" => {
                let n = count(&head)?;
                for _ in 0..n {
                    let (l, row) = lines.next_row("faces", line)?;
                    expect_len(l, &row, 3, "face row")?;
                    faces.push([num(l, row[0])?, num(l, row[1])?, num(l, row[2])?]);
                }
            }
            "weights" => {
                let n = count(&head)?;
                for _ in 0..n {
                    let (l, row) = lines.next_row("weights", line)?;
                    expect_len(l, &row, 3, "weight row")?;
                    triplets.push((num(l, row[0])?, num(l, row[1])?, num(l, row[2])?, l));
                }
            }
            "rom" => {
                let n = count(&head)?;
                for _ in 0..n {
                    let (l, row) = lines.next_row("rom", line)?;
                    expect_len(l, &row, 3, "rom row")?;
                    rom_rows.push((num(l, row[0])?, num(l, row[1])?, num(l, row[2])?, l));
                }
            }
            "markers" => {
                let n = count(&head)?;
                for _ in 0..n {
                    let (l, row) = lines.next_row("markers", line)?;
                    expect_len(l, &row, 1, "marker row")?;
                    markers.push(num(l, row[0])?);
                }
            }
            "hand" => {
                if head.len() < 2 {
                    return Err(err(line, "hand needs a side (left|right)"));
                }
                let joints: Vec<usize> = head[2..].iter().map(|t| num(line, t)).collect::<Result<_, _>>()?;
                match head[1] {
                    "left" => left_hand = joints,
                    "right" => right_hand = joints,
                    other => return Err(err(line, format!("unknown hand side {other:?}"))),
                }
            }
            other => return Err(err(line, format!("unknown section {other:?}"))),
        }
    }

    let parents = parents.ok_or_else(|| err(0, "missing `joints` section"))?;
    let vertices = vertices.ok_or_else(|| err(0, "missing `vertices` section"))?;
    let skeleton = Skeleton::new(parents, offsets)?;
    let mut weights = vec![Vec::new(); vertices.len()];
    for (v, j, w, l) in triplets {
        if v >= vertices.len() {
            return Err(err(l, format!("weight for vertex {v} out of range")));
        }
        weights[v].push((j, w));
    }
    let rom = if rom_rows.is_empty() {
        None
    } else {
        let n = 3 * skeleton.joint_count();
        let mut b = RomBounds::unbounded(n);
        for (c, lo, hi, l) in rom_rows {
            if c >= n {
                return Err(err(l, format!("rom channel {c} out of range (0..{n})")));
            }
            b.min[c] = lo;
            b.max[c] = hi;
        }
        Some(RomBounds::new(b.min, b.max)?)
    };
    SkinnedModel::new(ModelParts {
        skeleton,
        rest_vertices: vertices,
        weights,
        faces,
        marker_ids: markers,
        left_hand,
        right_hand,
        rom,
    })
}

pub fn load_rig(path: &Path) -> Result<SkinnedModel, BodyError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(0, format!("{}: {e}", path.display())))?;
    parse_rig(&text)
}

pub fn to_rig_string(model: &SkinnedModel) -> String {
    let mut out = String::new();
    let s = &model.skeleton;
    let _ = writeln!(out, "joints {}", s.joint_count());
    for j in 0..s.joint_count() {
        let o = s.offset(j);
        let p = s.parent(j).map_or(-1, |p| p as i64);
        let _ = writeln!(out, "{p} {} {} {}", o.x, o.y, o.z);
    }
    let _ = writeln!(out, "vertices {}", model.rest_vertices.len());
    for v in &model.rest_vertices {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    if !model.faces.is_empty() {
        let _ = writeln!(out, "faces {}", model.faces.len());
        for f in &model.faces {
            let _ = writeln!(out, "{} {} {}", f[0], f[1], f[2]);
        }
    }
    let total: usize = model.weights.iter().map(Vec::len).sum();
    let _ = writeln!(out, "weights {total}");
    for (v, row) in model.weights.iter().enumerate() {
        for (j, w) in row {
            let _ = writeln!(out, "{v} {j} {w}");
        }
    }
    let bounded: Vec<usize> =
        (0..model.rom.len()).filter(|&c| model.rom.min[c].is_finite() || model.rom.max[c].is_finite()).collect();
    if !bounded.is_empty() {
        let _ = writeln!(out, "rom {}", bounded.len());
        for c in bounded {
            let _ = writeln!(out, "{c} {} {}", model.rom.min[c], model.rom.max[c]);
        }
    }
    if !model.marker_ids.is_empty() {
        let _ = writeln!(out, "markers {}", model.marker_ids.len());
        for m in &model.marker_ids {
            let _ = writeln!(out, "{m}");
        }
    }
    for (side, joints) in [("left", &model.left_hand), ("right", &model.right_hand)] {
        if !joints.is_empty() {
            let list: Vec<String> = joints.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(out, "hand {side} {}", list.join(" "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# two-joint rig
joints 2
-1 0 0 0
0 1 0 0
vertices 3
0 0 0
1 0 0
2 0.5 0
weights 4
0 0 1
1 0 0.5
1 1 0.5
2 1 1.0
rom 1
3 -0.5 1.5
markers 2
0
2
hand right 1
";

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("../../../../docs/rig_format.md");
        let example = doc.split("## Example").nth(1).unwrap().split("```").nth(1).unwrap();
        let model = parse_rig(example).unwrap();
        assert_eq!(model.skeleton.joint_count(), 2);
        assert_eq!(model.marker_ids, vec![0, 2]);
        assert_eq!(model.right_hand, vec![1]);
    }

    #[test]
    fn parses_small_rig() {
        let m = parse_rig(SMALL).unwrap();
        assert_eq!(m.joint_count(), 2);
        assert_eq!(m.weights[1], vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(m.marker_ids, vec![0, 2]);
        assert_eq!(m.right_hand, vec![1]);
        assert_eq!((m.rom.min[3], m.rom.max[3]), (-0.5, 1.5));
        assert!(m.rom.max[0].is_infinite());
    }

    #[test]
    fn writer_round_trips() {
        let m = parse_rig(SMALL).unwrap();
        let back = parse_rig(&to_rig_string(&m)).unwrap();
        assert_eq!(back.rest_vertices, m.rest_vertices);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.rom, m.rom);
        assert_eq!(back.skeleton, m.skeleton);
    }

    #[test]
    fn reports_line_of_error() {
        let bad = SMALL.replace("2 1 1.0", "2 1 abc");
        assert!(matches!(parse_rig(&bad), Err(BodyError::Parse { line: 13, .. })));
        let truncated = "joints 2\n-1 0 0 0\n";
        assert!(matches!(parse_rig(truncated), Err(BodyError::Parse { .. })));
        let unknown = "bones 2\n";
        assert!(matches!(parse_rig(unknown), Err(BodyError::Parse { line: 1, .. })));
    }
}
