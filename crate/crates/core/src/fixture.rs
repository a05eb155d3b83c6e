//! Plain-text topology fixtures.
//!
//! ```text
//! # comments and blank lines are ignored
//! field 200 200
//! range 50
//! destination 15
//! 0 73.933982822 73.933982822
//! 1 84.163738794 107.782197222
//! link 0 1 delay=0.08 prr=0.9
//! ```
//!
//! Header lines (`field`, `range`, `destination`) may appear anywhere but at
//! most once. Every other non-`link` line is a node: `id x y`. `link` lines
//! attach optional per-direction estimator values used by golden tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::topology::{Field, NodeId, Position, Topology, TopologyError};

/// Estimator values recorded for one directional link.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkFixture {
    pub delay: Option<f64>,
    pub prr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub topology: Topology,
    pub links: BTreeMap<(NodeId, NodeId), LinkFixture>,
}

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn syntax(line: usize, message: impl Into<String>) -> FixtureError {
    FixtureError::Syntax {
        line,
        message: message.into(),
    }
}

fn number<T: FromStr>(line: usize, what: &str, token: Option<&str>) -> Result<T, FixtureError> {
    let token = token.ok_or_else(|| syntax(line, format!("expected {what}")))?;
    token
        .parse()
        .map_err(|_| syntax(line, format!("invalid {what} `{token}`")))
}

fn finite(line: usize, what: &str, v: f64) -> Result<f64, FixtureError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(syntax(line, format!("{what} must be finite")))
    }
}

pub fn parse_fixture(text: &str) -> Result<Fixture, FixtureError> {
    let mut field = None;
    let mut range = None;
    let mut destination = None;
    let mut nodes = Vec::new();
    let mut links: BTreeMap<(NodeId, NodeId), LinkFixture> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let head = tokens.next().unwrap_or_default();
        match head {
            "field" => {
                if field.is_some() {
                    return Err(syntax(line, "duplicate `field` header"));
                }
                let w = finite(line, "width", number(line, "width", tokens.next())?)?;
                let h = finite(line, "height", number(line, "height", tokens.next())?)?;
                field = Some(Field {
                    width: w,
                    height: h,
                });
            }
            "range" => {
                if range.is_some() {
                    return Err(syntax(line, "duplicate `range` header"));
                }
                range = Some(finite(
                    line,
                    "range",
                    number(line, "range", tokens.next())?,
                )?);
            }
            "destination" => {
                if destination.is_some() {
                    return Err(syntax(line, "duplicate `destination` header"));
                }
                destination = Some(NodeId(number(line, "node id", tokens.next())?));
            }
            "link" => {
                let from = NodeId(number(line, "node id", tokens.next())?);
                let to = NodeId(number(line, "node id", tokens.next())?);
                let mut link = LinkFixture::default();
                for attr in tokens.by_ref() {
                    let (key, value) = attr
                        .split_once('=')
                        .ok_or_else(|| syntax(line, format!("expected key=value, got `{attr}`")))?;
                    let v = finite(line, key, number(line, key, Some(value))?)?;
                    match key {
                        "delay" if v > 0.0 => link.delay = Some(v),
                        "delay" => return Err(syntax(line, "delay must be positive")),
                        "prr" if (0.0..=1.0).contains(&v) => link.prr = Some(v),
                        "prr" => return Err(syntax(line, "prr must lie in [0, 1]")),
                        other => {
                            return Err(syntax(line, format!("unknown link attribute `{other}`")))
                        }
                    }
                }
                if links.insert((from, to), link).is_some() {
                    return Err(syntax(line, format!("duplicate link {from} -> {to}")));
                }
            }
            _ => {
                let id = NodeId(number(line, "node id", Some(head))?);
                let x = finite(line, "x", number(line, "x", tokens.next())?)?;
                let y = finite(line, "y", number(line, "y", tokens.next())?)?;
                nodes.push((id, Position::new(x, y)));
            }
        }
        if tokens.next().is_some() {
            return Err(syntax(line, "trailing tokens"));
        }
    }

    let field = field.ok_or(FixtureError::MissingHeader("field"))?;
    let range = range.ok_or(FixtureError::MissingHeader("range"))?;
    let destination = destination.ok_or(FixtureError::MissingHeader("destination"))?;
    let topology = Topology::new(nodes, field, range, destination)?;
    for &(from, to) in links.keys() {
        for id in [from, to] {
            if topology.position(id).is_none() {
                return Err(FixtureError::Syntax {
                    line: 0,
                    message: format!("link references unknown node {id}"),
                });
            }
        }
    }
    Ok(Fixture { topology, links })
}

/// Renders a fixture that [`parse_fixture`] reads back to an equal value.
pub fn write_fixture(fixture: &Fixture) -> String {
    let t = &fixture.topology;
    let mut out = String::new();
    let field = t.field();
    let _ = writeln!(out, "field {} {}", field.width, field.height);
    let _ = writeln!(out, "range {}", t.radio_range());
    let _ = writeln!(out, "destination {}", t.destination());
    for (id, p) in t.nodes() {
        let _ = writeln!(out, "{id} {} {}", p.x, p.y);
    }
    for (&(from, to), link) in &fixture.links {
        let _ = write!(out, "link {from} {to}");
        if let Some(d) = link.delay {
            let _ = write!(out, " delay={d}");
        }
        if let Some(p) = link.prr {
            let _ = write!(out, " prr={p}");
        }
        out.push('\n');
    }
    out
}

impl Topology {
    pub fn from_fixture_str(text: &str) -> Result<Topology, FixtureError> {
        parse_fixture(text).map(|f| f.topology)
    }

    pub fn to_fixture_string(&self) -> String {
        write_fixture(&Fixture {
            topology: self.clone(),
            links: BTreeMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = "\
# three nodes
field 100 50
range 40
destination 3
1 0 0
2 30 0   # relay
3 60 0
link 1 2 delay=0.05 prr=0.9
";

    #[test]
    fn parses_headers_nodes_and_links() {
        let f = parse_fixture(SMALL).unwrap();
        assert_eq!(f.topology.len(), 3);
        assert_eq!(f.topology.destination(), NodeId(3));
        assert_eq!(f.topology.radio_range(), 40.0);
        assert_eq!(
            f.links[&(NodeId(1), NodeId(2))],
            LinkFixture {
                delay: Some(0.05),
                prr: Some(0.9)
            }
        );
    }

    #[test]
    fn reports_line_numbers() {
        let text = "field 10 10\nrange 5\ndestination 1\n1 0 0\n2 1 zz\n";
        assert_eq!(
            parse_fixture(text),
            Err(FixtureError::Syntax {
                line: 5,
                message: "invalid y `zz`".into()
            })
        );
    }

    #[test]
    fn rejects_missing_headers_and_bad_values() {
        assert_eq!(
            parse_fixture("range 5\ndestination 1\n1 0 0\n2 1 1\n"),
            Err(FixtureError::MissingHeader("field"))
        );
        assert!(matches!(
            parse_fixture("field 10 10\nrange 5\ndestination 1\n1 0 0\n2 1 1\nlink 1 2 prr=1.5\n"),
            Err(FixtureError::Syntax { line: 6, .. })
        ));
        assert!(matches!(
            parse_fixture("field 10 10\nrange nan\ndestination 1\n1 0 0\n2 1 1\n"),
            Err(FixtureError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_fixture("field 10 10\nrange 5\ndestination 1\n1 0 0\n2 1 1\nlink 1 9\n"),
            Err(FixtureError::Syntax { .. })
        ));
        assert!(matches!(
            parse_fixture("field 10 10\nrange 5\ndestination 1\n1 0 0\n2 11 1\n"),
            Err(FixtureError::Topology(TopologyError::OutOfField { .. }))
        ));
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(
            coords in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 2..30),
            range in 1.0f64..100.0,
            delay in prop::option::of(1e-4f64..1.0),
        ) {
            let nodes = coords.iter().enumerate().map(|(i, &(x, y))| (NodeId(i as u32), Position::new(x, y)));
            let topology = Topology::new(nodes, Field { width: 500.0, height: 500.0 }, range, NodeId(0)).unwrap();
            let mut links = BTreeMap::new();
            links.insert((NodeId(0), NodeId(1)), LinkFixture { delay, prr: Some(0.5) });
            let fixture = Fixture { topology, links };
            let back = parse_fixture(&write_fixture(&fixture)).unwrap();
            prop_assert_eq!(back, fixture);
        }
    }
}
