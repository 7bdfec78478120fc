use std::fmt::Write as _;

use crate::domain::{Scanpath, TrialRecord};

/// Fill colors by pack word index: `BOT`, the words, `EOT`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordColors {
    pub palette: Vec<String>,
}

impl Default for WordColors {
    fn default() -> Self {
        let palette = [
            "#7f7f7f", "#e6194b", "#3cb44b", "#ffe119", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
            "#fabebe", "#008080", "#e6beff", "#9a6324", "#800000", "#aaffc3", "#808000",
        ];
        Self { palette: palette.iter().map(|c| c.to_string()).collect() }
    }
}

impl WordColors {
    /// Color of pack `j`; the palette repeats for long expressions.
    pub fn color(&self, j: usize) -> &str {
        &self.palette[j % self.palette.len()]
    }
}

/// Pixels of radius per √ms of fixation duration.
const RADIUS_PER_SQRT_MS: f64 = 0.8;
const LEGEND_ROW: f64 = 18.0;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Standalone SVG of a scanpath over the image frame: numbered circles of
/// radius ∝ √duration colored by the word that triggered them, the target
/// box in blue, and a legend of the words with the `BOT`/`EOT` sentinels
/// below the frame.
pub fn render_svg(record: &TrialRecord, scanpath: &Scanpath, colors: &WordColors) -> String {
    let (w, h) = (record.image.width as f64, record.image.height as f64);
    let labels: Vec<String> = std::iter::once("BOT".to_string())
        .chain(record.words.iter().cloned())
        .chain(std::iter::once("EOT".to_string()))
        .collect();
    let height = h + 10.0 + LEGEND_ROW * labels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(&record.trial_id));
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#f4f4f4" stroke="#000000"/>"##);
    let b = record.target_bbox;
    let _ = writeln!(
        s,
        r##"<rect class="bbox" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#0000ff" stroke-width="2"/>"##,
        b.x, b.y, b.w, b.h
    );
    let fixations = scanpath.flatten();
    if fixations.len() > 1 {
        let pts: Vec<String> = fixations.iter().map(|f| format!("{},{}", f.x, f.y)).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#333333" stroke-width="1"/>"##, pts.join(" "));
    }
    for (i, f) in fixations.iter().enumerate() {
        let r = RADIUS_PER_SQRT_MS * (f.duration_ms as f64).sqrt();
        let _ = writeln!(
            s,
            r##"<circle class="fixation" cx="{}" cy="{}" r="{r:.2}" fill="{}" fill-opacity="0.7" stroke="#000000"/>"##,
            f.x,
            f.y,
            colors.color(f.pack_index)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" dominant-baseline="central">{}</text>"#,
            f.x,
            f.y,
            i + 1
        );
    }
    for (j, label) in labels.iter().enumerate() {
        let y = h + 10.0 + LEGEND_ROW * j as f64;
        let _ = writeln!(
            s,
            r##"<rect class="legend" x="8" y="{y}" width="12" height="12" fill="{}" stroke="#000000"/>"##,
            colors.color(j)
        );
        let _ = writeln!(s, r#"<text x="26" y="{}" font-size="12">{}</text>"#, y + 10.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, SynthConfig};
    use crate::domain::Pack;

    fn record() -> TrialRecord {
        synthesize_corpus(&SynthConfig { n_records: 1, seed: 8, ..Default::default() }).unwrap().records.remove(0)
    }

    fn parse(svg: &str) -> roxmltree::Document<'_> {
        roxmltree::Document::parse(svg).expect("well-formed XML")
    }

    fn count(doc: &roxmltree::Document<'_>, tag: &str, class: &str) -> usize {
        doc.descendants().filter(|n| n.has_tag_name(tag) && n.attribute("class") == Some(class)).count()
    }

    #[test]
    fn empty_scanpath_has_box_and_legend() {
        let r = record();
        let svg = render_svg(&r, &Scanpath::new(vec![], false), &WordColors::default());
        let doc = parse(&svg);
        assert_eq!(count(&doc, "circle", "fixation"), 0);
        assert_eq!(count(&doc, "rect", "bbox"), 1);
        assert_eq!(count(&doc, "rect", "legend"), r.n_words() + 2);
        let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
        assert!(texts.contains(&"BOT") && texts.contains(&"EOT"));
    }

    #[test]
    fn numbered_circles_scaled_by_duration() {
        let mut r = record();
        r.words[0] = "a<b&\"c\"".into();
        let s = Scanpath::from_packs(
            vec![Pack::normal(0, &[(10.0, 20.0, 100)]), Pack::normal(1, &[(30.0, 40.0, 400), (50.0, 60.0, 100)])],
            r.n_words(),
        );
        let svg = render_svg(&r, &s, &WordColors::default());
        let doc = parse(&svg);
        let circles: Vec<_> =
            doc.descendants().filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("fixation")).collect();
        assert_eq!(circles.len(), 3);
        let radius = |i: usize| circles[i].attribute("r").unwrap().parse::<f64>().unwrap();
        assert!((radius(1) / radius(0) - 2.0).abs() < 1e-2);
        let colors = WordColors::default();
        assert_eq!(circles[0].attribute("fill"), Some(colors.color(0)));
        assert_eq!(circles[2].attribute("fill"), Some(colors.color(1)));
        let numbers: Vec<&str> = doc.descendants().filter(|n| n.is_element()).filter_map(|n| n.text()).filter(|t| t.parse::<u32>().is_ok()).collect();
        assert_eq!(numbers, ["1", "2", "3"]);
        assert!(doc.descendants().any(|n| n.text() == Some("a<b&\"c\"")));
        let bbox = doc.descendants().find(|n| n.attribute("class") == Some("bbox")).unwrap();
        assert_eq!(bbox.attribute("stroke"), Some("#0000ff"));
    }
}
