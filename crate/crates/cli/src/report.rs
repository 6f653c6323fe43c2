use std::fmt::Write as _;

use isocomp_core::importance::{rank_layers, ImportanceReport};

use crate::{AblationReport, CountReport};

pub const UNIFORM_MEDIUM_NOTE: &str = "note: the 139.8M figure quoted for the uniform bottleneck baseline is not \
reproduced by the literal recipe (Compress 1024->600, 24 x SmallBlock(600), Expand 600->1024, untied head); \
this is the count that recipe actually yields.";

/// `354823168` as `354,823,168`.
pub fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn count_table(r: &CountReport) -> String {
    let b = &r.breakdown;
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", r.name);
    let row = |out: &mut String, name: &str, n: u64| {
        let _ = writeln!(out, "  {name:<28} {:>15}", thousands(n));
    };
    row(&mut out, "token embedding", b.token_embedding);
    row(&mut out, "position embedding", b.position_embedding);
    for l in &b.layers {
        row(&mut out, &format!("layer {:>2} {}", l.index, l.spec), l.params);
    }
    row(&mut out, "final norm", b.final_norm);
    if b.lm_head > 0 {
        row(&mut out, "lm head (untied)", b.lm_head);
    } else {
        let _ = writeln!(out, "  {:<28} {:>15}", "lm head", "tied");
    }
    row(&mut out, "total", b.total);
    let _ = writeln!(out, "  {:<28} {:>15.1}M", "", b.total as f64 / 1e6);
    if let Some(c) = &r.comparison {
        let _ = writeln!(
            out,
            "reference {} = {}: ratio {:.2}x, reduction {:.1}%",
            c.reference,
            thousands(c.reference_params),
            c.ratio,
            c.reduction * 100.0
        );
    }
    if let Some(note) = &r.note {
        let _ = writeln!(out, "{note}");
    }
    out
}

pub fn importance_table(r: &ImportanceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rank  layer  spec                 score");
    for (rank, (index, score)) in rank_layers(r).into_iter().enumerate() {
        let spec = &r.layers[index].spec;
        let _ = writeln!(out, "{:>4}  {index:>5}  {spec:<18} {score:>9.6}", rank + 1);
    }
    for l in r.layers.iter().filter(|l| !l.ablatable) {
        let _ = writeln!(out, "   -  {:>5}  {:<18} not ablatable", l.index, l.spec);
    }
    let _ = writeln!(
        out,
        "argmax layer {} ({} sequences, {:?} space), gap ratio {}",
        r.argmax, r.n_sequences, r.output_space, r.gap_ratio
    );
    out
}

pub fn ablation_table(r: &AblationReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = r.seeds.iter().map(|s| format!("seed {s}")).collect();
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>7} {} {:>10}",
        "student",
        "params",
        "ratio",
        seeds.iter().map(|s| format!("{s:>10}")).collect::<String>(),
        "mean ppl"
    );
    for s in &r.students {
        let ppl: String = s.runs.iter().map(|run| format!("{:>10.3}", run.final_ppl)).collect();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>6.2}x {} {:>10.3}",
            s.preset,
            thousands(s.params),
            s.ratio,
            ppl,
            s.mean_final_ppl
        );
    }
    let _ = writeln!(out, "teacher: {} parameters", thousands(r.teacher_params));
    out
}
