//! Paired corpora, prediction files and exact-match evaluation.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::funql::{parse_mr, serialize_mr, FunqlError, MeaningRepresentation, MrNode, SignatureTable};
use crate::hybridtree::Sentence;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{predictions} predictions for {golds} gold meaning representations")]
    LengthMismatch { predictions: usize, golds: usize },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub sentence: Sentence,
    pub gold: MeaningRepresentation,
    pub language: String,
}

/// Result of reading a corpus: good records plus per-record failures.
#[derive(Debug, Default)]
pub struct Loaded {
    pub instances: Vec<Instance>,
    pub errors: Vec<CorpusError>,
}

/// Parses blank-line separated records of one sentence line followed by one
/// FunQL line.
pub fn parse_corpus(text: &str, table: &SignatureTable, language: &str) -> Loaded {
    let mut out = Loaded::default();
    let mut record: Vec<(usize, &str)> = Vec::new();
    let flush = |record: &mut Vec<(usize, &str)>, out: &mut Loaded| {
        if record.is_empty() {
            return;
        }
        let first = record[0].0;
        let result = match record.as_slice() {
            [(_, sentence), (mr_line, mr)] => Sentence::from_text(sentence)
                .map_err(|e| CorpusError::Record {
                    line: first,
                    message: e.to_string(),
                })
                .and_then(|sentence| {
                    parse_mr(mr, table)
                        .map(|gold| Instance {
                            sentence,
                            gold,
                            language: language.to_string(),
                        })
                        .map_err(|e| CorpusError::Record {
                            line: *mr_line,
                            message: e.to_string(),
                        })
                }),
            _ => Err(CorpusError::Record {
                line: first,
                message: format!("expected a sentence line and a FunQL line, found {} lines", record.len()),
            }),
        };
        match result {
            Ok(instance) => out.instances.push(instance),
            Err(e) => out.errors.push(e),
        }
        record.clear();
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut record, &mut out);
        } else {
            record.push((i + 1, line));
        }
    }
    flush(&mut record, &mut out);
    out
}

pub fn load_corpus(path: impl AsRef<Path>, table: &SignatureTable, language: &str) -> Result<Loaded, CorpusError> {
    Ok(parse_corpus(&std::fs::read_to_string(path)?, table, language))
}

pub fn format_corpus(instances: &[Instance]) -> String {
    let mut out = String::new();
    for (i, inst) in instances.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{}\n{}", inst.sentence.words().join(" "), serialize_mr(&inst.gold));
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, instances: &[Instance]) -> Result<(), CorpusError> {
    std::fs::write(path, format_corpus(instances))?;
    Ok(())
}

/// One FunQL string per line, an empty line for an abstention.
pub fn format_predictions(predictions: &[Option<MeaningRepresentation>]) -> String {
    let mut out = String::new();
    for p in predictions {
        if let Some(mr) = p {
            out.push_str(&serialize_mr(mr));
        }
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str, table: &SignatureTable) -> Result<Vec<Option<MeaningRepresentation>>, CorpusError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.trim();
            if line.is_empty() {
                return Ok(None);
            }
            parse_mr(line, table).map(Some).map_err(|e: FunqlError| CorpusError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

/// Exact structural match. Precision is over produced outputs and is 0 when
/// nothing was produced; recall and accuracy are over all inputs.
pub fn evaluate(predictions: &[Option<MeaningRepresentation>], golds: &[MeaningRepresentation]) -> Result<Metrics, CorpusError> {
    if predictions.len() != golds.len() {
        return Err(CorpusError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let produced = predictions.iter().filter(|p| p.is_some()).count();
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == Some(*g))
        .count();
    Ok(metrics_from_counts(correct, produced, golds.len()))
}

pub fn metrics_from_counts(correct: usize, produced: usize, total: usize) -> Metrics {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct, produced);
    let recall = ratio(correct, total);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: recall,
        precision,
        recall,
        f1,
        n: total,
    }
}

/// Prolog query text for a FunQL tree. The conversion is purely textual and
/// follows the usual GeoQuery conventions: `f_1(x)` relates the current
/// variable to `x` as `f(V, X)`, `f_2(x)` as `f(X, V)`, entity ids become
/// `const/2` goals, and meta predicates take a goal argument.
pub fn to_prolog(mr: &MeaningRepresentation) -> String {
    let mut vars = Vars(0);
    let root = mr.root();
    if root.unit.function() == "answer" && root.children.len() == 1 {
        let v = vars.fresh();
        let body = goal(&root.children[0], &v, &mut vars);
        format!("answer({v},({body}))")
    } else {
        let v = vars.fresh();
        goal(root, &v, &mut vars)
    }
}

struct Vars(usize);

impl Vars {
    fn fresh(&mut self) -> String {
        let i = self.0;
        self.0 += 1;
        let letter = (b'A' + (i % 26) as u8) as char;
        if i < 26 {
            letter.to_string()
        } else {
            format!("{letter}{}", i / 26)
        }
    }
}

/// Base symbol and argument template of a node (`cityid(*,_)` gives
/// `cityid` and `["*", "_"]`).
fn split_symbol(node: &MrNode) -> (&str, Vec<&str>) {
    let f = node.unit.function();
    match f.find('(').filter(|_| !node.unit.is_constant()) {
        Some(open) => (&f[..open], f[open + 1..f.len() - 1].split(',').collect()),
        None => (f, vec!["*"; node.children.len()]),
    }
}

fn term(node: &MrNode) -> String {
    let (name, parts) = split_symbol(node);
    if node.unit.is_constant() && parts.is_empty() {
        return name.to_string();
    }
    let mut kids = node.children.iter();
    let args: Vec<String> = parts
        .iter()
        .map(|p| if *p == "*" { kids.next().map(term).unwrap_or_default() } else { p.to_string() })
        .collect();
    format!("{name}({})", args.join(","))
}

const META: &[&str] = &[
    "largest", "smallest", "highest", "lowest", "longest", "shortest", "most", "fewest",
];

fn goal(node: &MrNode, v: &str, vars: &mut Vars) -> String {
    let (name, parts) = split_symbol(node);
    let kids = &node.children;
    if name.ends_with("id") && kids.iter().all(|k| k.unit.is_constant()) {
        return format!("const({v},{})", term(node));
    }
    if kids.is_empty() {
        return match parts.as_slice() {
            [] => format!("const({v},{name})"),
            _ => format!("{name}({v})"),
        };
    }
    let sub = |vars: &mut Vars, child: &MrNode, var: &str| goal(child, var, vars);
    match (name, kids.as_slice()) {
        ("exclude", [a, b]) => {
            let ga = sub(vars, a, v);
            let gb = sub(vars, b, v);
            format!("({ga},\\+ ({gb}))")
        }
        ("intersection", [a, b]) => {
            let ga = sub(vars, a, v);
            let gb = sub(vars, b, v);
            format!("({ga},{gb})")
        }
        ("count" | "sum", [a]) => {
            let w = vars.fresh();
            let ga = sub(vars, a, &w);
            format!("{name}({w},({ga}),{v})")
        }
        (meta, [a]) if META.iter().any(|m| meta.starts_with(m)) => {
            let ga = sub(vars, a, v);
            format!("{meta}({v},({ga}))")
        }
        (rel, [a]) if rel.ends_with("_1") || rel.ends_with("_2") => {
            let w = vars.fresh();
            let ga = sub(vars, a, &w);
            let base = &rel[..rel.len() - 2];
            if rel.ends_with("_1") {
                format!("{base}({v},{w}),{ga}")
            } else {
                format!("{base}({w},{v}),{ga}")
            }
        }
        (pred, [a]) => {
            let ga = sub(vars, a, v);
            format!("{ga},{pred}({v})")
        }
        (other, many) => {
            let goals: Vec<String> = many.iter().map(|k| sub(vars, k, v)).collect();
            format!("{other}({v},{})", goals.join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIGS: &str = "\
answer\tQUERY\tRIVER
answer\tQUERY\tSTATE
answer\tQUERY\tNUM
exclude\tRIVER\tRIVER,RIVER
river(all)\tRIVER\t
state(all)\tSTATE\t
traverse_2\tRIVER\tSTATE
next_to_2\tSTATE\tSTATE
loc_1\tSTATE\tRIVER
count\tNUM\tSTATE
largest\tSTATE\tSTATE
stateid\tSTATE\tSTATENAME
";

    fn table() -> SignatureTable {
        SignatureTable::parse(SIGS).unwrap()
    }

    fn mr(s: &str) -> MeaningRepresentation {
        parse_mr(s, &table()).unwrap()
    }

    #[test]
    fn single_record_round_trip() {
        let text = "What rivers do not run through Tennessee ?\n\
                    answer(exclude(river(all), traverse_2(stateid('tennessee'))))\n";
        let loaded = parse_corpus(text, &table(), "en");
        assert!(loaded.errors.is_empty());
        let inst = &loaded.instances[0];
        assert_eq!(inst.sentence.len(), 8);
        assert_eq!(inst.gold.node_count(), 6);
        assert_eq!(inst.language, "en");
    }

    #[test]
    fn empty_and_malformed() {
        let loaded = parse_corpus("", &table(), "en");
        assert!(loaded.instances.is_empty() && loaded.errors.is_empty());

        let text = "\nhow many states\ncount(state(all))\n\nbad record\nanswer(lake(all))\n\n\
                    one line only\n\nwhich states\nanswer(state(all))\n";
        let loaded = parse_corpus(text, &table(), "en");
        assert_eq!(loaded.instances.len(), 2);
        let lines: Vec<usize> = loaded
            .errors
            .iter()
            .map(|e| match e {
                CorpusError::Record { line, .. } => *line,
                _ => 0,
            })
            .collect();
        assert_eq!(lines, vec![6, 8]);
    }

    #[test]
    fn save_and_load_round_trip() {
        let text = "which states border texas\nanswer(next_to_2(stateid('texas')))\n\n\
                    how many states\nanswer(count(state(all)))\n";
        let loaded = parse_corpus(text, &table(), "en");
        let dir = std::env::temp_dir().join(format!("depht-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.txt");
        save_corpus(&path, &loaded.instances).unwrap();
        let again = load_corpus(&path, &table(), "en").unwrap();
        assert_eq!(again.instances, loaded.instances);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn metrics() {
        let golds: Vec<MeaningRepresentation> = (0..14).map(|_| mr("answer(state(all))")).collect();
        let wrong = mr("answer(river(all))");
        let preds: Vec<Option<MeaningRepresentation>> = (0..14)
            .map(|i| match i {
                0..=6 => Some(golds[i].clone()),
                7..=9 => Some(wrong.clone()),
                _ => None,
            })
            .collect();
        let m = evaluate(&preds, &golds).unwrap();
        assert!((m.precision - 0.7).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.f1 - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(m.n, 14);

        let all: Vec<_> = golds.iter().cloned().map(Some).collect();
        let m = evaluate(&all, &golds).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));

        let none = vec![None; 14];
        let m = evaluate(&none, &golds).unwrap();
        assert_eq!((m.accuracy, m.precision, m.f1), (0.0, 0.0, 0.0));

        assert!(matches!(
            evaluate(&none[..3], &golds),
            Err(CorpusError::LengthMismatch { predictions: 3, golds: 14 })
        ));
    }

    #[test]
    fn accuracy_equals_f1_without_abstentions() {
        let golds: Vec<MeaningRepresentation> = (0..5).map(|_| mr("answer(state(all))")).collect();
        let preds: Vec<_> = (0..5)
            .map(|i| Some(if i < 3 { golds[i].clone() } else { mr("answer(river(all))") }))
            .collect();
        let m = evaluate(&preds, &golds).unwrap();
        assert!((m.accuracy - m.f1).abs() < 1e-12);
    }

    #[test]
    fn prediction_files() {
        let preds = vec![Some(mr("answer(state(all))")), None, Some(mr("answer(count(state(all)))"))];
        let text = format_predictions(&preds);
        assert_eq!(text, "answer(state(all))\n\nanswer(count(state(all)))\n");
        assert_eq!(parse_predictions(&text, &table()).unwrap(), preds);
        assert!(matches!(
            parse_predictions("answer(state(all))\nanswer(\n", &table()),
            Err(CorpusError::Record { line: 2, .. })
        ));
    }

    #[test]
    fn prolog_strings() {
        assert_eq!(to_prolog(&mr("answer(state(all))")), "answer(A,(state(A)))");
        assert_eq!(
            to_prolog(&mr("answer(exclude(river(all), traverse_2(stateid('tennessee'))))")),
            "answer(A,((river(A),\\+ (traverse(B,A),const(B,stateid('tennessee'))))))"
        );
        assert_eq!(
            to_prolog(&mr("answer(count(state(all)))")),
            "answer(A,(count(B,(state(B)),A)))"
        );
        assert_eq!(
            to_prolog(&mr("answer(largest(loc_1(river(all))))")),
            "answer(A,(largest(A,(loc(A,B),river(B)))))"
        );
    }
}
