//! Self-contained SVG scatter plot of the comparison sweep: AUC-PR
//! against images presented, marker size encoding the train-set size,
//! bright colors for from-scratch runs and dark colors for multimodal
//! pretraining.

use std::fmt::Write;

use crate::eval::sweep::SweepRow;

fn arch_colors(arch: &str) -> (&'static str, &'static str) {
    // (bright = FS, dark = MP)
    if arch.starts_with("unet") {
        ("#74a9cf", "#084594")
    } else if arch.starts_with("enet") {
        ("#fdae6b", "#a63603")
    } else if arch.starts_with("fcdn") {
        ("#a1d99b", "#00441b")
    } else {
        ("#bdbdbd", "#252525")
    }
}

pub fn sweep_scatter_svg(rows: &[SweepRow], title: &str) -> String {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let (width, height) = (720.0, 460.0);
    let (ml, mr, mt, mb) = (64.0, 170.0, 36.0, 52.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let x_max = ok
        .iter()
        .map(|r| r.images_presented)
        .max()
        .unwrap_or(1)
        .max(1) as f64
        * 1.06;
    let y_min = ok
        .iter()
        .map(|r| r.auc_pr)
        .fold(1.0f64, f64::min)
        .min(0.95)
        - 0.04;
    let y_min = y_min.max(0.0);
    let y_max = 1.0;

    let x_of = |v: f64| ml + pw * v / x_max;
    let y_of = |v: f64| mt + ph * (1.0 - (v - y_min) / (y_max - y_min));

    let mut sizes: Vec<usize> = ok.iter().map(|r| r.cell.train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let radius = |size: usize| {
        let rank = sizes.iter().position(|&s| s == size).unwrap_or(0);
        3.2 + 1.9 * rank as f64
    };

    let mut s = String::new();
    write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    write!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/><text x="{}" y="22" font-size="15" text-anchor="middle">{title}</text>"#,
        ml + pw / 2.0
    )
    .unwrap();

    // Axes and ticks.
    write!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    )
    .unwrap();
    for i in 0..=5 {
        let xv = x_max * i as f64 / 5.0;
        let x = x_of(xv);
        write!(
            s,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 20.0,
            xv.round() as u64
        )
        .unwrap();
        let yv = y_min + (y_max - y_min) * i as f64 / 5.0;
        let y = y_of(yv);
        write!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{ml}" y2="{y}" stroke="black"/><text x="{}" y="{}" font-size="11" text-anchor="end">{yv:.3}</text>"#,
            ml - 5.0,
            ml - 9.0,
            y + 4.0
        )
        .unwrap();
    }
    write!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">images presented</text>"#,
        ml + pw / 2.0,
        height - 12.0
    )
    .unwrap();
    write!(
        s,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">AUC-PR</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    )
    .unwrap();

    // Points.
    for r in &ok {
        let (bright, dark) = arch_colors(&r.cell.arch);
        let color = if r.cell.init == "mp" { dark } else { bright };
        write!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="{:.1}" fill="{color}" fill-opacity="0.75" stroke="{color}"/>"#,
            x_of(r.images_presented as f64),
            y_of(r.auc_pr),
            radius(r.cell.train_size)
        )
        .unwrap();
    }

    // Legend: arch/init colors, then size-to-radius mapping.
    let mut archs: Vec<&str> = ok.iter().map(|r| r.cell.arch.as_str()).collect();
    archs.sort_unstable();
    archs.dedup();
    let lx = ml + pw + 18.0;
    let mut ly = mt + 8.0;
    for arch in archs {
        let (bright, dark) = arch_colors(arch);
        for (label, color) in [("FS", bright), ("MP", dark)] {
            write!(
                s,
                r#"<circle cx="{lx}" cy="{ly}" r="5" fill="{color}"/><text x="{}" y="{}" font-size="12">{arch} {label}</text>"#,
                lx + 10.0,
                ly + 4.0
            )
            .unwrap();
            ly += 18.0;
        }
    }
    ly += 6.0;
    for &size in &sizes {
        write!(
            s,
            r#"<circle cx="{lx}" cy="{ly}" r="{:.1}" fill="none" stroke="black"/><text x="{}" y="{}" font-size="12">{size} train images</text>"#,
            radius(size),
            lx + 12.0,
            ly + 4.0
        )
        .unwrap();
        ly += 20.0;
    }
    s.push_str("</svg>\n");
    s
}
