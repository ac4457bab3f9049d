//! Datasets: character corpora (on-disk PGM trees or synthetic glyph
//! alphabets) and synthetic tracking sequences with crop construction.
//!
//! The on-disk layout is `root/<split>/<alphabet>/<character>/<instance>.pgm`
//! with `split` one of `background` / `evaluation`, 8-bit binary PGM (P5)
//! files, traversed in alphabetical order. All images are normalized to
//! `[0, 1]` and characters are resized to 28x28 on ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{standard_normal, Triplet};
use crate::{Error, Result};

/// Side length of every ingested character image.
pub const CHAR_SIZE: usize = 28;

#[derive(Clone, Debug)]
pub struct Character<F> {
    /// Instance images, each `[28, 28, 1]` in `[0, 1]`.
    pub instances: Vec<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Alphabet<F> {
    pub name: String,
    pub characters: Vec<Character<F>>,
}

/// Alphabets partitioned into a background split (for training) and an
/// evaluation split (unseen classes for one-shot testing).
#[derive(Clone, Debug)]
pub struct CharacterDataset<F> {
    pub background: Vec<Alphabet<F>>,
    pub evaluation: Vec<Alphabet<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Background,
    Evaluation,
}

impl<F: Scalar> CharacterDataset<F> {
    pub fn split(&self, split: Split) -> &[Alphabet<F>] {
        match split {
            Split::Background => &self.background,
            Split::Evaluation => &self.evaluation,
        }
    }

    pub fn image_count(&self) -> usize {
        self.background
            .iter()
            .chain(&self.evaluation)
            .flat_map(|a| &a.characters)
            .map(|c| c.instances.len())
            .sum()
    }
}

/// Axis-aligned object box: center coordinates and size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A miniature video: frames plus one ground-truth object box per frame.
#[derive(Clone, Debug)]
pub struct SyntheticSequence<F> {
    pub frames: Vec<Tensor<F>>,
    pub object_boxes: Vec<ObjectBox>,
}

// ── PGM I/O ─────────────────────────────────────────────────────────────

/// Parse an 8-bit binary PGM (P5) file already read into memory.
fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<Vec<u8>> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err("truncated header"));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = token(&mut pos)?;
    if magic != b"P5" {
        return Err(err("not a binary PGM (P5) file"));
    }
    let parse_dim = |tok: Vec<u8>, what: &str| -> Result<usize> {
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| err(&format!("bad {what} in header")))
    };
    let w = parse_dim(token(&mut pos)?, "width")?;
    let h = parse_dim(token(&mut pos)?, "height")?;
    let maxval = parse_dim(token(&mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(err(&format!("unsupported depth: maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(err(&format!(
            "truncated raster: expected {} bytes, found {}",
            w * h,
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((h, w, bytes[pos..pos + w * h].to_vec()))
}

/// Read a PGM file into a `[h, w, 1]` image with values in `[0, 1]`.
pub fn read_pgm<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (h, w, raster) = parse_pgm(&bytes, path)?;
    let data = raster.iter().map(|&b| F::from_f64(b as f64 / 255.0)).collect();
    Ok(Tensor::new(vec![h, w, 1], data))
}

/// Write a `[h, w, 1]` image in `[0, 1]` as binary PGM with maxval 255.
pub fn write_pgm<F: Scalar>(path: &Path, image: &Tensor<F>) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("write_pgm expects [h, w, 1], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    fs::write(path, out)?;
    Ok(())
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Load a character dataset from the on-disk PGM tree rooted at `root`.
///
/// Every image is resized to 28x28. Alphabets, characters, and instances
/// are traversed in alphabetical order so loading is deterministic.
pub fn load_pgm_dataset<F: Scalar>(root: &Path) -> Result<CharacterDataset<F>> {
    let load_split = |split: &str| -> Result<Vec<Alphabet<F>>> {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing split directory {}", dir.display())));
        }
        let mut alphabets = Vec::new();
        for alpha_dir in sorted_dir_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = alpha_dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut characters = Vec::new();
            for char_dir in sorted_dir_entries(&alpha_dir)?.into_iter().filter(|p| p.is_dir()) {
                let mut instances = Vec::new();
                for img_path in sorted_dir_entries(&char_dir)? {
                    if img_path.extension().is_some_and(|e| e == "pgm") {
                        let img = read_pgm::<F>(&img_path)?;
                        instances.push(resize(&img, CHAR_SIZE, CHAR_SIZE));
                    }
                }
                if instances.is_empty() {
                    return Err(Error::Data(format!(
                        "empty character directory {}",
                        char_dir.display()
                    )));
                }
                if instances.len() < 2 {
                    return Err(Error::Data(format!(
                        "character {} has fewer than 2 instances",
                        char_dir.display()
                    )));
                }
                characters.push(Character { instances });
            }
            if characters.is_empty() {
                return Err(Error::Data(format!(
                    "alphabet {} has no characters",
                    alpha_dir.display()
                )));
            }
            alphabets.push(Alphabet { name, characters });
        }
        if alphabets.is_empty() {
            return Err(Error::Data(format!("no alphabets under {}", dir.display())));
        }
        Ok(alphabets)
    };

    Ok(CharacterDataset {
        background: load_split("background")?,
        evaluation: load_split("evaluation")?,
    })
}

/// Write a dataset back out as the standard PGM tree (for inspection or as
/// input to later runs).
pub fn export_dataset<F: Scalar>(ds: &CharacterDataset<F>, root: &Path) -> Result<()> {
    for (split, alphabets) in [("background", &ds.background), ("evaluation", &ds.evaluation)] {
        for alpha in alphabets.iter() {
            for (ci, ch) in alpha.characters.iter().enumerate() {
                let dir = root.join(split).join(&alpha.name).join(format!("char{ci:03}"));
                fs::create_dir_all(&dir)?;
                for (ii, img) in ch.instances.iter().enumerate() {
                    write_pgm(&dir.join(format!("{ii:03}.pgm")), img)?;
                }
            }
        }
    }
    Ok(())
}

// ── Resizing ────────────────────────────────────────────────────────────

/// Resize with bilinear interpolation; reductions of 2x or more are first
/// box-filtered by the integer factor to avoid aliasing. Identity resizes
/// return a bitwise-equal copy and values stay inside `[0, 1]`.
pub fn resize<F: Scalar>(image: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let (h, w, _c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => panic!("resize expects [h, w, c], got {s:?}"),
    };
    assert!(out_h > 0 && out_w > 0, "resize: target dims must be positive");
    if h == out_h && w == out_w {
        return image.clone();
    }
    let kh = if out_h > 0 { h / out_h } else { 1 };
    let kw = if out_w > 0 { w / out_w } else { 1 };
    if kh >= 2 || kw >= 2 {
        let reduced = box_filter(image, kh.max(1), kw.max(1));
        return bilinear(&reduced, out_h, out_w);
    }
    bilinear(image, out_h, out_w)
}

/// Average non-overlapping `kh x kw` blocks (trailing remainder rows/cols
/// are averaged into the last block).
fn box_filter<F: Scalar>(image: &Tensor<F>, kh: usize, kw: usize) -> Tensor<F> {
    if kh == 1 && kw == 1 {
        return image.clone();
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let oh = h / kh;
    let ow = w / kw;
    let mut out = vec![F::zero(); oh * ow * c];
    for i in 0..oh {
        let y1 = if i + 1 == oh { h } else { (i + 1) * kh };
        for j in 0..ow {
            let x1 = if j + 1 == ow { w } else { (j + 1) * kw };
            for cc in 0..c {
                let mut acc = F::zero();
                let mut count = 0usize;
                for y in i * kh..y1 {
                    for x in j * kw..x1 {
                        acc += image.at(&[y, x, cc]);
                        count += 1;
                    }
                }
                out[(i * ow + j) * c + cc] = acc / F::from_f64(count as f64);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

fn bilinear<F: Scalar>(image: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == out_h && w == out_w {
        return image.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![F::zero(); out_h * out_w * c];
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64(fy - y0 as f64);
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64(fx - x0 as f64);
            for cc in 0..c {
                let one = F::one();
                let v = image.at(&[y0, x0, cc]) * (one - wy) * (one - wx)
                    + image.at(&[y0, x1, cc]) * (one - wy) * wx
                    + image.at(&[y1, x0, cc]) * wy * (one - wx)
                    + image.at(&[y1, x1, cc]) * wy * wx;
                out[(i * out_w + j) * c + cc] = v;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

// ── Synthetic glyphs ────────────────────────────────────────────────────

/// A glyph prototype: a random polyline in normalized stroke coordinates.
#[derive(Clone)]
struct Strokes {
    points: Vec<(f64, f64)>,
}

fn random_strokes<R: Rng + ?Sized>(rng: &mut R, extent: f64) -> Strokes {
    let n = rng.random_range(4..=7);
    let lo = 0.18 * extent;
    let hi = 0.82 * extent;
    let points = (0..n)
        .map(|_| {
            (
                lo + rng.random::<f64>() * (hi - lo),
                lo + rng.random::<f64>() * (hi - lo),
            )
        })
        .collect();
    Strokes { points }
}

/// Render a polyline as an antialiased bright stroke on a dark background.
fn render_strokes<F: Scalar>(strokes: &Strokes, size: usize, thickness: f64) -> Tensor<F> {
    let mut out = vec![F::zero(); size * size];
    for (p0, p1) in strokes.points.iter().zip(strokes.points.iter().skip(1)) {
        for y in 0..size {
            for x in 0..size {
                let d = dist_to_segment(x as f64, y as f64, *p0, *p1);
                let v = (1.0 - d / thickness).clamp(0.0, 1.0);
                let idx = y * size + x;
                let cur = out[idx].as_f64();
                if v > cur {
                    out[idx] = F::from_f64(v);
                }
            }
        }
    }
    Tensor::new(vec![size, size, 1], out)
}

fn dist_to_segment(px: f64, py: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn jitter_strokes<R: Rng + ?Sized>(rng: &mut R, strokes: &Strokes, extent: f64) -> Strokes {
    let angle = (rng.random::<f64>() * 2.0 - 1.0) * 15.0_f64.to_radians();
    let scale = 0.9 + rng.random::<f64>() * 0.2;
    let tx = (rng.random::<f64>() * 2.0 - 1.0) * 2.0;
    let ty = (rng.random::<f64>() * 2.0 - 1.0) * 2.0;
    let (cx, cy) = (extent / 2.0, extent / 2.0);
    let (sin, cos) = angle.sin_cos();
    Strokes {
        points: strokes
            .points
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - cx, y - cy);
                let (rx, ry) = (dx * cos - dy * sin, dx * sin + dy * cos);
                (cx + scale * rx + tx, cy + scale * ry + ty)
            })
            .collect(),
    }
}

/// Generate a synthetic glyph dataset. Each character is a random polyline
/// prototype; instances are the prototype under small affine jitter
/// (rotation <= 15 degrees, translation <= 2 px, scale in [0.9, 1.1]) plus
/// Gaussian pixel noise (sigma 0.05), clamped to [0, 1]. Deterministic for
/// a given generator state.
pub fn gen_glyph_dataset<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    n_background: usize,
    n_eval: usize,
    chars_per_alphabet: usize,
    instances_per_char: usize,
) -> CharacterDataset<F> {
    assert!(n_background >= 1 && n_eval >= 1 && chars_per_alphabet >= 1);
    assert!(instances_per_char >= 2, "need at least 2 instances per character");
    let extent = CHAR_SIZE as f64;
    let mut gen_split = |count: usize, tag: &str| -> Vec<Alphabet<F>> {
        (0..count)
            .map(|ai| {
                let characters = (0..chars_per_alphabet)
                    .map(|_| {
                        let proto = random_strokes(rng, extent);
                        let instances = (0..instances_per_char)
                            .map(|_| {
                                let jittered = jitter_strokes(rng, &proto, extent);
                                let img = render_strokes::<F>(&jittered, CHAR_SIZE, 1.6);
                                Tensor::from_fn(vec![CHAR_SIZE, CHAR_SIZE, 1], |i| {
                                    let noisy = img.data()[i].as_f64() + 0.05 * standard_normal(rng);
                                    F::from_f64(noisy.clamp(0.0, 1.0))
                                })
                            })
                            .collect();
                        Character { instances }
                    })
                    .collect();
                Alphabet { name: format!("{tag}{ai:03}"), characters }
            })
            .collect()
    };
    CharacterDataset {
        background: gen_split(n_background, "bg"),
        evaluation: gen_split(n_eval, "ev"),
    }
}

// ── Tracking sequences and crops ────────────────────────────────────────

/// Generate a synthetic tracking sequence: a textured glyph patch moving by
/// a smooth random walk (per-frame step <= 3 px per axis) over a static
/// noise background; boxes track the patch exactly.
pub fn gen_tracking_sequence<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    length: usize,
    frame_size: usize,
    object_size: usize,
) -> SyntheticSequence<F> {
    assert!(length >= 1, "sequence length must be positive");
    assert!(object_size + 2 <= frame_size, "object must fit in the frame");

    // Static per-sequence background noise in [0, 0.35].
    let background: Vec<f64> = (0..frame_size * frame_size)
        .map(|_| rng.random::<f64>() * 0.35)
        .collect();

    // Textured glyph patch: bright strokes plus mild texture noise.
    let strokes = random_strokes(rng, object_size as f64);
    let patch = render_strokes::<f64>(&strokes, object_size, 1.4);
    let patch: Vec<f64> = patch
        .data()
        .iter()
        .map(|&v| (0.45 + 0.55 * v + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
        .collect();

    let half = (object_size / 2) as i64;
    let lo = half;
    let hi = (frame_size as i64) - (object_size as i64 - half);
    let mut cx = rng.random_range(lo..=hi - 1);
    let mut cy = rng.random_range(lo..=hi - 1);
    let mut vx: i64 = 0;
    let mut vy: i64 = 0;

    let mut frames = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            vx = (vx + rng.random_range(-2..=2)).clamp(-3, 3);
            vy = (vy + rng.random_range(-2..=2)).clamp(-3, 3);
            let nx = (cx + vx).clamp(lo, hi - 1);
            let ny = (cy + vy).clamp(lo, hi - 1);
            vx = nx - cx;
            vy = ny - cy;
            cx = nx;
            cy = ny;
        }
        let mut frame = background.clone();
        let left = (cx - half) as usize;
        let top = (cy - half) as usize;
        for dy in 0..object_size {
            for dx in 0..object_size {
                frame[(top + dy) * frame_size + (left + dx)] = patch[dy * object_size + dx];
            }
        }
        frames.push(Tensor::new(
            vec![frame_size, frame_size, 1],
            frame.iter().map(|&v| F::from_f64(v)).collect(),
        ));
        boxes.push(ObjectBox {
            cx: (left as f64) + object_size as f64 / 2.0,
            cy: (top as f64) + object_size as f64 / 2.0,
            w: object_size as f64,
            h: object_size as f64,
        });
    }
    SyntheticSequence { frames, object_boxes: boxes }
}

/// Square crop of side `side` centered at `(cx, cy)`; pixels outside the
/// frame are filled with the frame's mean intensity.
pub fn crop_with_mean_pad<F: Scalar>(frame: &Tensor<F>, cx: f64, cy: f64, side: usize) -> Tensor<F> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mean = F::from_f64(
        frame.data().iter().map(|v| v.as_f64()).sum::<f64>() / frame.numel() as f64,
    );
    let left = (cx - side as f64 / 2.0).round() as i64;
    let top = (cy - side as f64 / 2.0).round() as i64;
    let mut out = vec![mean; side * side];
    for dy in 0..side as i64 {
        let y = top + dy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for dx in 0..side as i64 {
            let x = left + dx;
            if x < 0 || x >= w as i64 {
                continue;
            }
            out[(dy * side as i64 + dx) as usize] = frame.at(&[y as usize, x as usize, 0]);
        }
    }
    Tensor::new(vec![side, side, 1], out)
}

/// Build one tracking triplet from a pair of sequences.
///
/// The exemplar `z` is a crop double the object size around the box in a
/// random frame of `seq_a`, resized to `exemplar_size`. A positive candidate
/// `x` is a crop four times the object size, centered on the object in a
/// frame of `seq_a` at most 50 frames away; a negative comes from `seq_b`
/// (which does not contain the object). Out-of-frame regions are filled with
/// the frame's mean color.
pub fn make_tracking_triplet<F: Scalar, R: Rng + ?Sized>(
    seq_a: &SyntheticSequence<F>,
    seq_b: &SyntheticSequence<F>,
    rng: &mut R,
    positive_fraction: f64,
    exemplar_size: usize,
    search_size: usize,
) -> Result<Triplet<F>> {
    let i = rng.random_range(0..seq_a.frames.len());
    let zbox = seq_a.object_boxes[i];
    let obj = zbox.w.max(zbox.h);
    let z_raw = crop_with_mean_pad(&seq_a.frames[i], zbox.cx, zbox.cy, (2.0 * obj).round() as usize);
    let z = resize(&z_raw, exemplar_size, exemplar_size);

    let positive = rng.random::<f64>() < positive_fraction;
    let (frame, bx) = if positive {
        if seq_a.frames.len() < 2 {
            return Err(Error::Data(
                "positive tracking draw needs a sequence with at least 2 frames".into(),
            ));
        }
        let lo = i.saturating_sub(50);
        let hi = (i + 50).min(seq_a.frames.len() - 1);
        let mut j = rng.random_range(lo..=hi);
        while j == i {
            j = rng.random_range(lo..=hi);
        }
        (&seq_a.frames[j], seq_a.object_boxes[j])
    } else {
        let k = rng.random_range(0..seq_b.frames.len());
        (&seq_b.frames[k], seq_b.object_boxes[k])
    };
    let sobj = bx.w.max(bx.h);
    let x_raw = crop_with_mean_pad(frame, bx.cx, bx.cy, (4.0 * sobj).round() as usize);
    let x = resize(&x_raw, search_size, search_size);

    Ok(Triplet { z, x, label: if positive { 1.0 } else { -1.0 } })
}

/// Write a sequence as `frame_%04d.pgm` files plus a `boxes.csv`
/// (`frame,cx,cy,w,h`) in `dir`.
pub fn export_sequence<F: Scalar>(seq: &SyntheticSequence<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("frame,cx,cy,w,h\n");
    for (i, (frame, b)) in seq.frames.iter().zip(&seq.object_boxes).enumerate() {
        write_pgm(&dir.join(format!("frame_{i:04}.pgm")), frame)?;
        csv.push_str(&format!("{i},{},{},{},{}\n", b.cx, b.cy, b.w, b.h));
    }
    fs::write(dir.join("boxes.csv"), csv)?;
    Ok(())
}

/// Load a sequence written by [`export_sequence`].
pub fn load_sequence<F: Scalar>(dir: &Path) -> Result<SyntheticSequence<F>> {
    let csv = fs::read_to_string(dir.join("boxes.csv"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("boxes.csv").display())))?;
    let mut frames = Vec::new();
    let mut boxes = Vec::new();
    for line in csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!("bad boxes.csv line: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number in boxes.csv: {s}")))
        };
        let idx: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad frame index in boxes.csv: {}", fields[0])))?;
        frames.push(read_pgm(&dir.join(format!("frame_{idx:04}.pgm")))?);
        boxes.push(ObjectBox {
            cx: parse(fields[1])?,
            cy: parse(fields[2])?,
            w: parse(fields[3])?,
            h: parse(fields[4])?,
        });
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("no frames listed in {}", dir.display())));
    }
    Ok(SyntheticSequence { frames, object_boxes: boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::from_fn(vec![5, 7, 1], |i| (i % 256) as f32 / 255.0);
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img).unwrap();
        let back: Tensor<f32> = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) < 1.0 / 255.0 / 2.0 + 1e-6);
    }

    #[test]
    fn pgm_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P6\n3 3\n255\n123456789").unwrap();
        let err = read_pgm::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("P5"), "{err}");

        std::fs::write(&p, b"P5\n4 4\n255\nshort").unwrap();
        let err = read_pgm::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(err.to_string().contains("bad.pgm"), "error should name the path: {err}");

        std::fs::write(&p, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
        let err = read_pgm::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }

    #[test]
    fn dataset_export_load_inventory() {
        let mut r = rng(1);
        let ds: CharacterDataset<f32> = gen_glyph_dataset(&mut r, 2, 1, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let back: CharacterDataset<f32> = load_pgm_dataset(dir.path()).unwrap();
        assert_eq!(back.background.len(), 2);
        assert_eq!(back.evaluation.len(), 1);
        assert_eq!(back.background[0].characters.len(), 3);
        assert_eq!(back.background[0].characters[0].instances.len(), 4);
        assert_eq!(
            back.background[0].characters[0].instances[0].shape(),
            &[CHAR_SIZE, CHAR_SIZE, 1]
        );
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = Tensor::<f64>::from_fn(vec![9, 9, 1], |i| (i as f64 * 0.013) % 1.0);
        assert_eq!(resize(&img, 9, 9), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::<f64>::filled(vec![10, 14, 1], 0.4);
        for v in resize(&img, 7, 5).data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_round_trip_on_smooth_gradient() {
        let img = Tensor::<f64>::from_fn(vec![16, 16, 1], |i| {
            let (y, x) = (i / 16, i % 16);
            0.25 + 0.4 * (x as f64 / 15.0) + 0.3 * (y as f64 / 15.0) * (x as f64 / 15.0)
        });
        let up = resize(&img, 32, 32);
        let down = resize(&up, 16, 16);
        assert!(img.max_abs_diff(&down) <= 0.02, "diff {}", img.max_abs_diff(&down));
    }

    #[test]
    fn downsample_preserves_mean() {
        let img = Tensor::<f64>::from_fn(vec![56, 56, 1], |i| ((i * 37) % 101) as f64 / 100.0);
        let small = resize(&img, 28, 28);
        let mean_in: f64 = img.data().iter().sum::<f64>() / img.numel() as f64;
        let mean_out: f64 = small.data().iter().sum::<f64>() / small.numel() as f64;
        assert!(
            (mean_in - mean_out).abs() / mean_in <= 0.05,
            "means {mean_in} vs {mean_out}"
        );
    }

    #[test]
    fn glyph_dataset_is_deterministic() {
        let a: CharacterDataset<f32> = gen_glyph_dataset(&mut rng(7), 2, 2, 3, 3);
        let b: CharacterDataset<f32> = gen_glyph_dataset(&mut rng(7), 2, 2, 3, 3);
        for (x, y) in a.background.iter().zip(&b.background) {
            for (cx, cy) in x.characters.iter().zip(&y.characters) {
                for (ix, iy) in cx.instances.iter().zip(&cy.instances) {
                    assert_eq!(ix, iy);
                }
            }
        }
    }

    #[test]
    fn glyph_instances_cluster_by_character() {
        let ds: CharacterDataset<f64> = gen_glyph_dataset(&mut rng(11), 1, 1, 8, 6);
        let chars = &ds.background[0].characters;
        let dist = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.numel() as f64
        };
        let mut r = rng(12);
        let mut within = 0.0;
        let mut between = 0.0;
        let n = 1000;
        for _ in 0..n {
            let ca = r.random_range(0..chars.len());
            let (i, j) = (r.random_range(0..6), r.random_range(0..6));
            within += dist(&chars[ca].instances[i], &chars[ca].instances[j.min(5)]);
            let mut cb = r.random_range(0..chars.len());
            while cb == ca {
                cb = r.random_range(0..chars.len());
            }
            between += dist(&chars[ca].instances[i], &chars[cb].instances[j]);
        }
        assert!(
            within / (n as f64) < between / (n as f64),
            "within {within} not below between {between}"
        );
    }

    #[test]
    fn tracking_sequence_contract() {
        let seq: SyntheticSequence<f32> = gen_tracking_sequence(&mut rng(3), 1, 48, 12);
        assert_eq!(seq.frames.len(), 1);
        assert_eq!(seq.object_boxes.len(), 1);

        let seq: SyntheticSequence<f32> = gen_tracking_sequence(&mut rng(4), 40, 64, 16);
        for win in seq.object_boxes.windows(2) {
            assert!((win[1].cx - win[0].cx).abs() <= 3.0);
            assert!((win[1].cy - win[0].cy).abs() <= 3.0);
        }
        for b in &seq.object_boxes {
            assert!(b.cx - b.w / 2.0 >= 0.0 && b.cx + b.w / 2.0 <= 64.0);
            assert!(b.cy - b.h / 2.0 >= 0.0 && b.cy + b.h / 2.0 <= 64.0);
        }

        let a: SyntheticSequence<f32> = gen_tracking_sequence(&mut rng(5), 10, 64, 16);
        let b: SyntheticSequence<f32> = gen_tracking_sequence(&mut rng(5), 10, 64, 16);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn crop_interior_matches_direct_slice_and_corner_pads_with_mean() {
        let frame = Tensor::<f64>::from_fn(vec![20, 20, 1], |i| ((i * 13) % 97) as f64 / 96.0);
        let crop = crop_with_mean_pad(&frame, 10.0, 10.0, 8);
        for dy in 0..8 {
            for dx in 0..8 {
                assert_eq!(crop.at(&[dy, dx, 0]), frame.at(&[6 + dy, 6 + dx, 0]));
            }
        }

        let mean: f64 = frame.data().iter().sum::<f64>() / frame.numel() as f64;
        let corner = crop_with_mean_pad(&frame, 0.0, 0.0, 8);
        // Top-left quadrant of this crop lies outside the frame.
        assert_eq!(corner.at(&[0, 0, 0]), mean);
        assert_eq!(corner.at(&[3, 3, 0]), mean);
        assert_eq!(corner.at(&[4, 4, 0]), frame.at(&[0, 0, 0]));
    }

    #[test]
    fn tracking_triplets_have_expected_shapes_and_labels() {
        let a: SyntheticSequence<f64> = gen_tracking_sequence(&mut rng(8), 30, 64, 16);
        let b: SyntheticSequence<f64> = gen_tracking_sequence(&mut rng(9), 30, 64, 16);
        let mut r = rng(10);
        let t = make_tracking_triplet(&a, &b, &mut r, 1.0, 32, 64).unwrap();
        assert_eq!(t.z.shape(), &[32, 32, 1]);
        assert_eq!(t.x.shape(), &[64, 64, 1]);
        assert_eq!(t.label, 1.0);
        let t = make_tracking_triplet(&a, &b, &mut r, 0.0, 32, 64).unwrap();
        assert_eq!(t.label, -1.0);

        let single: SyntheticSequence<f64> = gen_tracking_sequence(&mut rng(8), 1, 64, 16);
        assert!(make_tracking_triplet(&single, &b, &mut r, 1.0, 32, 64).is_err());
    }

    #[test]
    fn sequence_export_load_round_trip() {
        let seq: SyntheticSequence<f32> = gen_tracking_sequence(&mut rng(13), 5, 48, 12);
        let dir = tempfile::tempdir().unwrap();
        export_sequence(&seq, dir.path()).unwrap();
        let back: SyntheticSequence<f32> = load_sequence(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 5);
        assert_eq!(back.object_boxes, seq.object_boxes);
    }
}
