//! Per-iteration query diagnostics and their trend across iterations.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Passage, ReformulationInstance};
use crate::error::{Error, Result};
use crate::text::terms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    #[default]
    Set,
    Multiset,
}

/// Sørensen-Dice overlap of the token sets (or bags) of `a` and `b`.
pub fn dice_with(a: &str, b: &str, mode: DiceMode) -> f64 {
    let (ta, tb) = (terms(a), terms(b));
    let (inter, total) = match mode {
        DiceMode::Set => {
            let sa: HashSet<&String> = ta.iter().collect();
            let sb: HashSet<&String> = tb.iter().collect();
            (sa.intersection(&sb).count(), sa.len() + sb.len())
        }
        DiceMode::Multiset => {
            let mut counts: HashMap<&String, usize> = HashMap::new();
            for t in &ta {
                *counts.entry(t).or_default() += 1;
            }
            let mut inter = 0;
            for t in &tb {
                if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
                    *c -= 1;
                    inter += 1;
                }
            }
            (inter, ta.len() + tb.len())
        }
    };
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * inter as f64 / total as f64,
    }
}

pub fn dice(a: &str, b: &str) -> f64 {
    dice_with(a, b, DiceMode::Set)
}

/// Unique token n-grams over total n-grams; 1.0 when the text is too short
/// to contain one.
pub fn distinct_ngram_ratio(text: &str, n: usize) -> f64 {
    let toks = terms(text);
    if n == 0 || toks.len() < n {
        return 1.0;
    }
    let grams: Vec<&[String]> = toks.windows(n).collect();
    let unique: HashSet<&[String]> = grams.iter().copied().collect();
    unique.len() as f64 / grams.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub iteration: usize,
    pub dice_history: f64,
    pub dice_gold: f64,
    pub token_length: f64,
    pub distinct_3gram_ratio: f64,
}

const METRICS: [&str; 4] = ["dice_history", "dice_gold", "token_length", "distinct_3gram_ratio"];

impl QueryStats {
    fn values(&self) -> [f64; 4] {
        [self.dice_history, self.dice_gold, self.token_length, self.distinct_3gram_ratio]
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Macro-averaged diagnostics; `queries[i]` reformulates `instances[i]`.
pub fn analyze_iteration(
    queries: &[String],
    instances: &[ReformulationInstance],
    passages: &[Passage],
    iteration: usize,
    mode: DiceMode,
) -> Result<QueryStats> {
    if queries.len() != instances.len() {
        return Err(Error::Validation(format!(
            "{} queries for {} instances",
            queries.len(),
            instances.len()
        )));
    }
    let texts: HashMap<&str, &str> = passages.iter().map(|p| (p.passage_id.as_str(), p.text.as_str())).collect();
    let gold_texts = instances
        .iter()
        .map(|inst| {
            inst.gold_passage_ids
                .iter()
                .map(|pid| {
                    texts
                        .get(pid.as_str())
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("gold passage {pid} not in collection")))
                })
                .collect::<Result<Vec<_>>>()
                .map(|parts| parts.join(" "))
        })
        .collect::<Result<Vec<String>>>()?;
    let pairs = || queries.iter().zip(instances);
    Ok(QueryStats {
        iteration,
        dice_history: mean(
            pairs()
                .filter(|(_, inst)| !inst.history_text.is_empty())
                .map(|(q, inst)| dice_with(q, &inst.history_text, mode)),
        ),
        dice_gold: mean(queries.iter().zip(&gold_texts).map(|(q, g)| dice_with(q, g, mode))),
        token_length: mean(queries.iter().map(|q| terms(q).len() as f64)),
        distinct_3gram_ratio: mean(queries.iter().map(|q| distinct_ngram_ratio(q, 3))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotFormat {
    #[default]
    Svg,
    Png,
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: f64 = 40.0;

fn plot_points(stats: &[QueryStats], metric: usize) -> Vec<(f64, f64)> {
    let xs: Vec<f64> = stats.iter().map(|s| s.iteration as f64).collect();
    let ys: Vec<f64> = stats.iter().map(|s| s.values()[metric]).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let y1 = ys.iter().cloned().fold(0.0, f64::max).max(1e-9);
    let span = (x1 - x0).max(1.0);
    let (w, h) = (PLOT_W as f64 - 2.0 * MARGIN, PLOT_H as f64 - 2.0 * MARGIN);
    xs.iter()
        .zip(&ys)
        .map(|(x, y)| (MARGIN + (x - x0) / span * w, PLOT_H as f64 - MARGIN - y / y1 * h))
        .collect()
}

fn svg_plot(name: &str, stats: &[QueryStats], metric: usize) -> String {
    let pts = plot_points(stats, metric);
    let poly: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let (b, r) = (PLOT_H as f64 - MARGIN, PLOT_W as f64 - MARGIN);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{name}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        poly.join(" ")
    );
    for ((x, y), s) in pts.iter().zip(stats) {
        out += &format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            b + 16.0,
            s.iteration
        );
    }
    out + "</svg>\n"
}

fn draw_line(img: &mut image::RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: image::Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn png_plot(stats: &[QueryStats], metric: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let black = image::Rgb([0, 0, 0]);
    let (b, r) = (PLOT_H as f64 - MARGIN, PLOT_W as f64 - MARGIN);
    draw_line(&mut img, (MARGIN, b), (r, b), black);
    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, b), black);
    let pts = plot_points(stats, metric);
    let blue = image::Rgb([70, 130, 180]);
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1], blue);
    }
    for &(x, y) in &pts {
        draw_line(&mut img, (x - 3.0, y), (x + 3.0, y), blue);
        draw_line(&mut img, (x, y - 3.0), (x, y + 3.0), blue);
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

/// Writes `trend.csv` and one line plot per metric into `out_dir`, returning
/// every file written.
pub fn trend_report(stats: &[QueryStats], out_dir: &Path, format: PlotFormat) -> Result<Vec<PathBuf>> {
    if stats.is_empty() {
        return Err(Error::Validation("trend report needs at least one iteration".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("trend.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for s in stats {
        w.serialize(s).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mut written = vec![csv_path];
    for (m, name) in METRICS.iter().enumerate() {
        let path = out_dir.join(format!("{name}.{}", match format {
            PlotFormat::Svg => "svg",
            PlotFormat::Png => "png",
        }));
        match format {
            PlotFormat::Svg => fs::write(&path, svg_plot(name, stats, m)).map_err(|e| Error::io(&path, e))?,
            PlotFormat::Png => png_plot(stats, m, &path)?,
        }
        written.push(path);
    }
    Ok(written)
}

pub fn read_trend_csv(path: &Path) -> Result<Vec<QueryStats>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice("a b c", "a b c"), 1.0);
        assert!((dice("a b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice("a a b", "a b b"), 1.0);
        assert_eq!(dice("", ""), 1.0);
        assert_eq!(dice("a", ""), 0.0);
        assert!((dice_with("a a b", "a b b", DiceMode::Multiset) - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(distinct_ngram_ratio("a b c d", 3), 1.0);
        assert!((distinct_ngram_ratio("a b a b a", 3) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_ngram_ratio("a b", 3), 1.0);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_reflexive(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
            prop_assert_eq!(dice(&a, &b), dice(&b, &a));
            prop_assert_eq!(dice_with(&a, &b, DiceMode::Multiset), dice_with(&b, &a, DiceMode::Multiset));
            let d = dice(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
            if !terms(&a).is_empty() {
                prop_assert_eq!(dice(&a, &a), 1.0);
            }
            let r = distinct_ngram_ratio(&a, 3);
            prop_assert!(r > 0.0 && r <= 1.0);
        }
    }

    fn instance(id: &str, history: &str, gold: &[&str]) -> ReformulationInstance {
        ReformulationInstance {
            instance_id: id.into(),
            session_id: "s".into(),
            turn_index: 1,
            current_query: "q".into(),
            history_text: history.into(),
            gold_passage_ids: gold.iter().map(|g| g.to_string()).collect(),
            bootstrap_rewrite: None,
            topic_shift_by_label: None,
            topic_shift_by_pid: None,
        }
    }

    fn passage(id: &str, text: &str) -> Passage {
        Passage {
            passage_id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn analyze_fixture_by_hand() {
        let passages = vec![passage("g1", "x y z"), passage("g2", "a b"), passage("g3", "c d")];
        let instances = vec![
            instance("i1", "", &["g1"]),
            instance("i2", "a b c d", &["g2"]),
            instance("i3", "a", &["g2", "g3"]),
        ];
        let queries = vec!["x y z".to_string(), "a b".to_string(), "a b a b a".to_string()];
        let s = analyze_iteration(&queries, &instances, &passages, 2, DiceMode::Set).unwrap();
        // i1 has no history and is left out of the history average.
        // i2: {a,b} vs {a,b,c,d} = 4/6; i3: {a,b} vs {a} = 2/3.
        assert!((s.dice_history - (4.0 / 6.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // gold: 1, 1, {a,b} vs {a,b,c,d} = 4/6.
        assert!((s.dice_gold - (1.0 + 1.0 + 4.0 / 6.0) / 3.0).abs() < 1e-12);
        assert!((s.token_length - (3.0 + 2.0 + 5.0) / 3.0).abs() < 1e-12);
        assert!((s.distinct_3gram_ratio - (1.0 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(s.iteration, 2);
        assert!(matches!(
            analyze_iteration(&queries[..2], &instances, &passages, 0, DiceMode::Set),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn trend_round_trip_and_plots() {
        let stats: Vec<QueryStats> = (0..3)
            .map(|t| QueryStats {
                iteration: t,
                dice_history: 0.1 * t as f64,
                dice_gold: 0.3 + 0.01 * t as f64,
                token_length: 7.0 - t as f64,
                distinct_3gram_ratio: 0.987654321,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        for format in [PlotFormat::Svg, PlotFormat::Png] {
            let out = dir.path().join(format!("{format:?}"));
            let files = trend_report(&stats, &out, format).unwrap();
            assert_eq!(files.len(), 5);
            for f in &files {
                assert!(fs::metadata(f).unwrap().len() > 0);
            }
            let csv = fs::read_to_string(&files[0]).unwrap();
            assert_eq!(csv.lines().count(), 4);
            assert!(csv.starts_with("iteration,dice_history,dice_gold,token_length,distinct_3gram_ratio"));
            assert_eq!(read_trend_csv(&files[0]).unwrap(), stats);
        }
        assert!(trend_report(&[], dir.path(), PlotFormat::Svg).is_err());
    }
}
