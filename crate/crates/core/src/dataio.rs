//! Dataset ingestion, answer extraction, and the synthetic dictionary
//! transfer task used by the desk-scale benchmark.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{load_jsonl, save_jsonl};
use crate::error::{Error, Result};
use crate::oracle::FnOracle;
use crate::tokenizer::tokenize_str;

/// One QA item: context, question, answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QADatapoint {
    pub task_id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl QADatapoint {
    /// Prompt framing used for the solver input.
    pub fn task_prompt(&self) -> String {
        if self.context.is_empty() {
            format!("Question: {}", self.question)
        } else {
            format!("Context: {} Question: {}", self.context, self.question)
        }
    }
}

/// Load generic QA records from line-delimited JSON.
pub fn load_qa_jsonl(path: &Path) -> Result<Vec<QADatapoint>> {
    let items: Vec<QADatapoint> = load_jsonl(path)?;
    for (i, item) in items.iter().enumerate() {
        if item.question.trim().is_empty() {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: "question must be non-empty".into(),
            });
        }
    }
    Ok(items)
}

pub fn save_qa_jsonl(items: &[QADatapoint], path: &Path) -> Result<()> {
    save_jsonl(items, path)
}

/// Parse the numbered-line story format: statement lines accumulate context,
/// question lines (tab-separated answer and supporting ids) emit datapoints,
/// and a line id of 1 starts a fresh story.
pub fn parse_babi(path: &Path) -> Result<Vec<QADatapoint>> {
    let task_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "babi".to_string());
    let text = std::fs::read_to_string(path)?;
    let mut story: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let (id_str, rest) = raw
            .split_once(' ')
            .ok_or_else(|| parse_err("expected '<id> <text>'".into()))?;
        let id: u64 = id_str
            .parse()
            .map_err(|_| parse_err(format!("bad line id {id_str:?}")))?;
        if id == 1 {
            story.clear();
        }
        if rest.contains('\t') {
            let mut parts = rest.split('\t');
            let question = parts.next().unwrap().trim().to_string();
            let answer = parts
                .next()
                .ok_or_else(|| parse_err("question line is missing its answer".into()))?
                .trim()
                .to_string();
            // supporting fact ids: parsed for validity, otherwise unused
            if let Some(support) = parts.next() {
                for s in support.split_whitespace() {
                    s.parse::<u64>()
                        .map_err(|_| parse_err(format!("bad supporting id {s:?}")))?;
                }
            }
            out.push(QADatapoint {
                task_id: task_id.clone(),
                context: story.join(" "),
                question,
                answer,
            });
        } else {
            story.push(rest.trim().to_string());
        }
    }
    Ok(out)
}

/// Load every `*.txt` file of a directory as one task each, keeping the
/// first `per_task` datapoints of each (the low-data configuration).
pub fn load_babi_dir(dir: &Path, per_task: Option<usize>) -> Result<Vec<QADatapoint>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let mut items = parse_babi(&file)?;
        if let Some(n) = per_task {
            items.truncate(n);
        }
        out.extend(items);
    }
    Ok(out)
}

/// End-of-sequence markers stripped from extracted answers.
const EOS_MARKERS: &[&str] = &["</s>"];

/// Parse a generation into an answer.
///
/// When `Answer:` occurs (any case), the text after its last occurrence is
/// returned, trimmed and with trailing end-of-sequence markers removed.
/// Otherwise the generation is returned verbatim. Total on any input.
pub fn extract_answer(generation: &str) -> String {
    let lower = generation.to_ascii_lowercase();
    match lower.rfind("answer:") {
        Some(pos) => {
            let mut rest = generation[pos + "answer:".len()..].trim();
            loop {
                let before = rest;
                rest = rest.trim_end();
                for marker in EOS_MARKERS {
                    if let Some(stripped) = rest.strip_suffix(marker) {
                        rest = stripped;
                    }
                }
                if rest == before {
                    break;
                }
            }
            rest.trim().to_string()
        }
        None => generation.to_string(),
    }
}

/* ---------------------- synthetic dictionary task ---------------------- */

/// A hidden bijection between two disjoint nonsense-symbol sets, verbalized
/// in source items and queried through novel carrier sentences in the target
/// split. Target questions are answerable only via the mapping; an audit
/// checks that no target answer leaks into a target context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDictionaryTask {
    pub mapping: Vec<(String, String)>,
    pub source: Vec<QADatapoint>,
    pub target: Vec<QADatapoint>,
}

const SOURCE_FILLERS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];
const TARGET_FILLERS: &[&str] = &[
    "old", "new", "red", "blue", "green", "grey", "small", "large", "thin", "wide",
];

impl SyntheticDictionaryTask {
    /// Exact-match accuracy of a uniform guesser over the answer set.
    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.mapping.len() as f64
    }

    /// No target answer may appear anywhere in a target context or question.
    pub fn audit(&self) -> Result<()> {
        let answers: HashSet<String> = self.target.iter().map(|d| d.answer.clone()).collect();
        for (i, item) in self.target.iter().enumerate() {
            for tok in tokenize_str(&item.context)
                .into_iter()
                .chain(tokenize_str(&item.question))
            {
                if answers.contains(&tok) {
                    return Err(Error::Config(format!(
                        "target item {i} leaks answer token {tok:?} into its carrier"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn nonsense_words(n: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    const CONSONANTS: &[char] = &[
        'b', 'd', 'f', 'g', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
    ];
    const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let w: String = [
            *CONSONANTS.choose(rng).unwrap(),
            *VOWELS.choose(rng).unwrap(),
            *CONSONANTS.choose(rng).unwrap(),
        ]
        .iter()
        .collect();
        if taken.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Deterministically generate the dictionary transfer task.
pub fn generate_dictionary_task(
    n_symbols: usize,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<SyntheticDictionaryTask> {
    if n_symbols < 4 {
        return Err(Error::Config(format!(
            "dictionary task needs at least 4 symbols, got {n_symbols}"
        )));
    }
    let source_cap = n_symbols * SOURCE_FILLERS.len();
    if n_source > source_cap {
        return Err(Error::Config(format!(
            "n_source ({n_source}) exceeds the {source_cap} distinct source combinations"
        )));
    }
    let target_cap = n_symbols * TARGET_FILLERS.len();
    if n_target > target_cap {
        return Err(Error::Config(format!(
            "n_target ({n_target}) exceeds the {target_cap} distinct target combinations"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // reserved words of the carrier templates never collide with symbols
    let mut taken: HashSet<String> = [
        "entry", "of", "the", "codebook", "lists", "codeword", "pairs", "with", "what", "name",
        "pair", "ledger", "cites",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for f in SOURCE_FILLERS.iter().chain(TARGET_FILLERS) {
        taken.insert(f.to_string());
    }
    let left = nonsense_words(n_symbols, &mut rng, &mut taken);
    let mut right = nonsense_words(n_symbols, &mut rng, &mut taken);
    right.shuffle(&mut rng);
    let mapping: Vec<(String, String)> = left.into_iter().zip(right).collect();

    let mut source = Vec::with_capacity(n_source);
    for i in 0..n_source {
        let (x, y) = &mapping[i % n_symbols];
        let filler = SOURCE_FILLERS[i / n_symbols];
        source.push(QADatapoint {
            task_id: "dict-source".into(),
            context: format!("entry {filler} of the codebook lists {x}."),
            question: format!("codeword {x} pairs with what?"),
            answer: y.clone(),
        });
    }
    let mut target = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let (x, y) = &mapping[i % n_symbols];
        let filler = TARGET_FILLERS[i / n_symbols];
        target.push(QADatapoint {
            task_id: "dict-target".into(),
            context: format!("the {filler} ledger cites codeword {x}."),
            question: format!("name the pair of codeword {x}"),
            answer: y.clone(),
        });
    }

    let task = SyntheticDictionaryTask {
        mapping,
        source,
        target,
    };
    task.audit()?;
    Ok(task)
}

/// Rule-based teacher for the dictionary task. It only verbalizes what its
/// prompt already shows: with an answer line present it states the mapping
/// entry, without one it can only restate the queried symbol.
pub fn dictionary_teacher() -> FnOracle<impl Fn(&str) -> String + Send + Sync> {
    FnOracle::new("mock:dictionary-teacher", |prompt: &str| {
        let line_after = |tag: &str| {
            prompt
                .lines()
                .find_map(|l| l.strip_prefix(tag))
                .map(str::trim)
        };
        let question = line_after("Question: ");
        let answer = line_after("Answer: ");
        let symbol = question.and_then(|q| {
            q.split_once("codeword ")
                .and_then(|(_, rest)| rest.split_whitespace().next())
                .map(|w| w.trim_end_matches(|c: char| !c.is_alphanumeric()))
        });
        match (symbol, answer) {
            (Some(x), Some(y)) => format!("codeword {x} becomes {y}"),
            (Some(x), None) => format!("the codebook lists codeword {x}"),
            _ => "no explanation available".to_string(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleRequest, TeacherOracle};

    #[test]
    fn parses_the_standard_story_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa_directions.txt");
        std::fs::write(
            &path,
            "1 The kitchen is south of the bathroom.\n\
             2 The bedroom is south of the kitchen.\n\
             3 What is south of the kitchen?\tbedroom\t2\n\
             1 Mary got the milk there.\n\
             2 John moved to the bedroom.\n\
             3 What is Mary carrying?\tmilk\t1\n",
        )
        .unwrap();
        let items = parse_babi(&path).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(
            items[0].context,
            "The kitchen is south of the bathroom. The bedroom is south of the kitchen."
        );
        assert_eq!(items[0].question, "What is south of the kitchen?");
        assert_eq!(items[0].answer, "bedroom");
        // id reset to 1 cleared the story window
        assert_eq!(
            items[1].context,
            "Mary got the milk there. John moved to the bedroom."
        );
        assert_eq!(items[1].task_id, "qa_directions");
    }

    #[test]
    fn malformed_lines_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "1 ok statement\nnot-a-numbered-line\n").unwrap();
        match parse_babi(&path) {
            Err(Error::Parse { line, file, .. }) => {
                assert_eq!(line, 2);
                assert!(file.ends_with("bad.txt"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn low_data_config_takes_five_per_task() {
        let dir = tempfile::tempdir().unwrap();
        for t in 0..20 {
            let mut text = String::new();
            for i in 0..8 {
                text.push_str(&format!("1 Statement about item {i}.\n"));
                text.push_str(&format!("2 Question {i}?\tanswer{i}\t1\n"));
            }
            std::fs::write(dir.path().join(format!("task{t:02}.txt")), text).unwrap();
        }
        let items = load_babi_dir(dir.path(), Some(5)).unwrap();
        assert_eq!(items.len(), 100);
        let again = load_babi_dir(dir.path(), Some(5)).unwrap();
        assert_eq!(items, again);
    }

    #[test]
    fn extract_answer_handles_the_reference_cases() {
        assert_eq!(
            extract_answer("Rationale: Yes, because he had to get up early on Saturday. Answer: yes"),
            "yes"
        );
        assert_eq!(
            extract_answer("Mary got the milk there."),
            "Mary got the milk there."
        );
        assert_eq!(extract_answer("Answer: a Answer: b"), "b");
    }

    #[test]
    fn extract_answer_strips_end_markers_and_stays_total() {
        assert_eq!(extract_answer("Rationale: fine. Answer: yes</s>"), "yes");
        assert_eq!(extract_answer("Answer: no</s></s>  "), "no");
        assert_eq!(extract_answer(""), "");
        assert_eq!(extract_answer("answer:"), "");
        // lowercase generations parse too
        assert_eq!(extract_answer("it rains answer: wet"), "wet");
    }

    #[test]
    fn dictionary_task_is_deterministic_and_audited() {
        let a = generate_dictionary_task(10, 50, 50, 7).unwrap();
        let b = generate_dictionary_task(10, 50, 50, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_dictionary_task(10, 50, 50, 8).unwrap();
        assert_ne!(a.mapping, c.mapping);

        assert_eq!(a.source.len(), 50);
        assert_eq!(a.target.len(), 50);
        assert!((a.chance_accuracy() - 0.1).abs() < 1e-12);
        a.audit().unwrap();

        // mapping sides are disjoint
        let left: HashSet<_> = a.mapping.iter().map(|(x, _)| x.clone()).collect();
        let right: HashSet<_> = a.mapping.iter().map(|(_, y)| y.clone()).collect();
        assert!(left.is_disjoint(&right));
        assert_eq!(left.len(), 10);
        assert_eq!(right.len(), 10);
    }

    #[test]
    fn dictionary_task_rejects_impossible_sizes() {
        assert!(matches!(
            generate_dictionary_task(3, 10, 10, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_dictionary_task(10, 101, 50, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_dictionary_task(10, 50, 101, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dictionary_teacher_verbalizes_only_what_it_sees() {
        let teacher = dictionary_teacher();
        let ask = |prompt: &str| {
            teacher
                .complete(&OracleRequest {
                    prompt: prompt.to_string(),
                    max_tokens: 32,
                    temperature: 0.0,
                    oracle_id: "mock".into(),
                })
                .unwrap()
        };
        let posterior = ask(
            "Context: entry one of the codebook lists zib.\nQuestion: codeword zib pairs with what?\nAnswer: dax\nWhy?",
        );
        assert_eq!(posterior, "codeword zib becomes dax");
        let prior = ask(
            "Context: entry one of the codebook lists zib.\nQuestion: codeword zib pairs with what?\nWhy?",
        );
        assert_eq!(prior, "the codebook lists codeword zib");
        assert!(!prior.contains("dax"));
        let fallback = ask("Context: something else\nWhy?");
        assert_eq!(fallback, "no explanation available");
    }

    #[test]
    fn qa_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let items = vec![
            QADatapoint {
                task_id: "t".into(),
                context: "line one\nwith a newline".into(),
                question: "q?".into(),
                answer: "a".into(),
            },
            QADatapoint {
                task_id: "t".into(),
                context: String::new(),
                question: "only q".into(),
                answer: "b".into(),
            },
        ];
        save_qa_jsonl(&items, &path).unwrap();
        assert_eq!(load_qa_jsonl(&path).unwrap(), items);
        assert_eq!(items[1].task_prompt(), "Question: only q");
        assert!(items[0].task_prompt().starts_with("Context: line one"));
    }
}
