//! Online log template mining with a fixed-depth parse tree.
//!
//! ```text
//!                 root
//!                  |
//!            token count (3)
//!                  |
//!             "connected"        first `depth` tokens, one level each
//!                  |
//!                "to"
//!                  |
//!                "<*>"           digit-bearing or overflow tokens
//!                  |
//!       [connected to <*>]       leaf: candidate templates
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};

/// Token marking a variable position.
pub const WILDCARD: &str = "<*>";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrainConfig {
    /// Number of token levels below the length level.
    pub depth: usize,
    pub sim_threshold: f64,
    /// Maximum number of concrete-token children per node; further tokens share the `<*>` child.
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            sim_threshold: 0.5,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Argument("depth must be positive".into()));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(Error::Argument(format!(
                "sim_threshold must lie in (0, 1], got {}",
                self.sim_threshold
            )));
        }
        if self.max_children == 0 {
            return Err(Error::Argument("max_children must be positive".into()));
        }
        Ok(())
    }
}

/// A mined message type ("log key").
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogTemplate {
    pub id: usize,
    pub tokens: Vec<String>,
    pub match_count: u64,
}

impl LogTemplate {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// True when every concrete template token equals the line token at that position.
    fn covers(&self, tokens: &[String]) -> bool {
        self.tokens.iter().zip(tokens).all(|(t, l)| t == WILDCARD || t == l)
    }
}

#[derive(Clone, Debug, Default)]
struct Node {
    children: HashMap<String, Node>,
    templates: Vec<usize>,
}

impl Node {
    fn concrete_children(&self) -> usize {
        self.children.len() - usize::from(self.children.contains_key(WILDCARD))
    }
}

#[derive(Clone, Debug)]
pub struct DrainTree {
    config: DrainConfig,
    by_length: HashMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

/// Whitespace tokenization with digit-bearing tokens replaced by the wildcard.
pub fn preprocess(raw_line: &str) -> Vec<String> {
    raw_line
        .split_whitespace()
        .map(|tok| {
            if tok.bytes().any(|b| b.is_ascii_digit()) {
                WILDCARD.to_string()
            } else {
                tok.to_string()
            }
        })
        .collect()
}

/// Fraction of positions where the template holds a concrete token equal to the line token.
///
/// Panics if the lengths differ; callers partition by token count first.
pub fn similarity(tokens: &[String], template: &LogTemplate) -> f64 {
    assert_eq!(
        tokens.len(),
        template.tokens.len(),
        "similarity needs equal token counts"
    );
    assert!(!tokens.is_empty(), "similarity of empty token lists");
    let same = tokens
        .iter()
        .zip(&template.tokens)
        .filter(|(l, t)| *t != WILDCARD && l == t)
        .count();
    same as f64 / tokens.len() as f64
}

impl DrainTree {
    pub fn new(config: DrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            by_length: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    pub fn template(&self, id: usize) -> Option<&LogTemplate> {
        self.templates.get(id)
    }

    /// Assigns `raw_line` to a template, creating one if nothing is similar enough.
    pub fn parse_line(&mut self, raw_line: &str) -> Result<(usize, &LogTemplate)> {
        let tokens = preprocess(raw_line);
        if tokens.is_empty() {
            return Err(Error::EmptyLine);
        }
        let id = self.parse_tokens(tokens);
        Ok((id, &self.templates[id]))
    }

    fn parse_tokens(&mut self, tokens: Vec<String>) -> usize {
        let DrainConfig {
            depth,
            sim_threshold,
            max_children,
        } = self.config;

        let mut node = self.by_length.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(depth) {
            let key = if tok.contains(WILDCARD) {
                WILDCARD
            } else if node.children.contains_key(tok.as_str()) || node.concrete_children() < max_children {
                tok.as_str()
            } else {
                WILDCARD
            };
            node = node.children.entry(key.to_string()).or_default();
        }

        // candidates are kept in increasing id order, so strict `>` keeps the lowest id on ties
        let mut best: Option<(usize, f64)> = None;
        for &id in &node.templates {
            let sim = similarity(&tokens, &self.templates[id]);
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((id, sim));
            }
        }
        let chosen = match best {
            Some((id, sim)) if sim >= sim_threshold => Some(id),
            // a line that already fits a template verbatim (only wildcards differ)
            // belongs to it even when wildcards drag similarity under the threshold
            _ => node
                .templates
                .iter()
                .copied()
                .find(|&id| self.templates[id].covers(&tokens)),
        };

        match chosen {
            Some(id) => {
                let template = &mut self.templates[id];
                for (t, l) in template.tokens.iter_mut().zip(&tokens) {
                    if t != l {
                        *t = WILDCARD.to_string();
                    }
                }
                template.match_count += 1;
                id
            }
            None => {
                let id = self.templates.len();
                node.templates.push(id);
                self.templates.push(LogTemplate {
                    id,
                    tokens,
                    match_count: 1,
                });
                id
            }
        }
    }

    /// Templates in id order.
    pub fn export_templates(&self) -> Vec<LogTemplate> {
        self.templates.clone()
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    /// Longest root-to-leaf path in nodes, counting the length node and the leaf.
    pub fn max_path_nodes(&self) -> usize {
        fn height(node: &Node) -> usize {
            1 + node.children.values().map(height).max().unwrap_or(0)
        }
        // a token node that holds templates is itself the leaf, so add it explicitly
        self.by_length.values().map(height).max().map_or(0, |h| h + 1)
    }
}

/// Writes `id<TAB>match_count<TAB>tokens` lines.
pub fn write_templates<W: Write>(templates: &[LogTemplate], mut out: W) -> io::Result<()> {
    let mut line = String::new();
    for t in templates {
        line.clear();
        let _ = write!(line, "{}\t{}\t{}", t.id, t.match_count, t.text());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_templates<R: BufRead>(input: R) -> io::Result<Vec<LogTemplate>> {
    let mut templates = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || io::Error::new(io::ErrorKind::InvalidData, format!("bad template line {}", n + 1));
        let mut cols = line.splitn(3, '\t');
        let id = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let match_count = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let tokens: Vec<String> = cols.next().ok_or_else(bad)?.split(' ').map(str::to_string).collect();
        if id != templates.len() {
            return Err(bad());
        }
        templates.push(LogTemplate {
            id,
            tokens,
            match_count,
        });
    }
    Ok(templates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn template(tokens: &[&str]) -> LogTemplate {
        LogTemplate {
            id: 0,
            tokens: toks(tokens),
            match_count: 1,
        }
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess("connected to 10.0.0.1"), toks(&["connected", "to", "<*>"]));
        assert_eq!(
            preprocess("error code 5 on node7"),
            toks(&["error", "code", "<*>", "on", "<*>"])
        );
        assert!(preprocess("").is_empty());
        assert!(preprocess("   \t ").is_empty());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&toks(&["a", "b"]), &template(&["a", "<*>"])), 0.5);
        assert_eq!(similarity(&toks(&["a", "b"]), &template(&["a", "b"])), 1.0);
        assert_eq!(similarity(&toks(&["a", "b"]), &template(&["c", "<*>"])), 0.0);
    }

    #[test]
    fn merges_variable_addresses() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        assert_eq!(tree.parse_line("connected to 10.0.0.1").unwrap().0, 0);
        let (id, t) = tree.parse_line("connected to 10.0.0.2").unwrap();
        assert_eq!(id, 0);
        assert_eq!(t.tokens, toks(&["connected", "to", "<*>"]));
        assert_eq!(tree.export_templates().len(), 1);
        assert_eq!(tree.templates()[0].match_count, 2);
    }

    #[test]
    fn distinct_lengths_get_distinct_keys() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        assert_eq!(tree.parse_line("shutdown").unwrap().0, 0);
        assert_eq!(tree.parse_line("connected to X").unwrap().0, 1);
    }

    #[test]
    fn reparse_is_identity() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        tree.parse_line("disk sda failed hard").unwrap();
        let before = tree.export_templates();
        assert_eq!(tree.parse_line("disk sda failed hard").unwrap().0, 0);
        assert_eq!(tree.templates()[0].tokens, before[0].tokens);
    }

    #[test]
    fn mostly_variable_lines_reuse_their_template() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        let a = tree.parse_line("1 2 3 ok").unwrap().0;
        let b = tree.parse_line("4 5 6 ok").unwrap().0;
        assert_eq!(a, b);
        assert_eq!(tree.template_count(), 1);
    }

    #[test]
    fn empty_line_rejected() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        assert_eq!(tree.parse_line("  ").unwrap_err(), Error::EmptyLine);
        assert!(tree.export_templates().is_empty());
    }

    #[test]
    fn overflow_routes_to_catch_all() {
        let cfg = DrainConfig {
            depth: 1,
            sim_threshold: 0.5,
            max_children: 2,
        };
        let mut tree = DrainTree::new(cfg).unwrap();
        tree.parse_line("alpha x y").unwrap();
        tree.parse_line("beta x y").unwrap();
        // third and fourth first-tokens share the catch-all leaf and merge there
        let c = tree.parse_line("gamma x y").unwrap().0;
        let d = tree.parse_line("delta x y").unwrap().0;
        assert_eq!(c, d);
        assert_eq!(tree.templates()[c].tokens, toks(&["<*>", "x", "y"]));
        assert_eq!(tree.template_count(), 3);
    }

    #[test]
    fn path_bound() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        tree.parse_line("a b c d e f g h").unwrap();
        tree.parse_line("a b").unwrap();
        assert!(tree.max_path_nodes() <= tree.config().depth + 2);
        assert_eq!(tree.max_path_nodes(), 6);
    }

    #[test]
    fn invalid_config() {
        assert!(DrainTree::new(DrainConfig {
            depth: 0,
            ..Default::default()
        })
        .is_err());
        assert!(DrainTree::new(DrainConfig {
            sim_threshold: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(DrainTree::new(DrainConfig {
            max_children: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn template_file_roundtrip() {
        let mut tree = DrainTree::new(DrainConfig::default()).unwrap();
        for l in ["connected to 10.0.0.1", "connected to 10.0.0.2", "shutdown now"] {
            tree.parse_line(l).unwrap();
        }
        let mut buf = Vec::new();
        write_templates(tree.templates(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "0\t2\tconnected to <*>\n1\t1\tshutdown now\n"
        );
        assert_eq!(read_templates(&buf[..]).unwrap(), tree.export_templates());
    }
}
