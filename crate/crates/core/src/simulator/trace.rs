use std::fmt::Write as _;

use crate::forwarding::Decision;
use crate::time::SimTime;
use crate::topology::NodeId;

/// Per-run CSV logs, each starting with its header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub events: String,
    pub decisions: String,
    pub estimators: String,
    pub energy: String,
}

impl Default for Trace {
    fn default() -> Self {
        Trace {
            events: "time,kind,node,detail\n".into(),
            decisions: "time,packet_id,node,chosen,reason,metric\n".into(),
            estimators: "time,from,to,prr,delay\n".into(),
            energy: "time,node,what,joules\n".into(),
        }
    }
}

impl Trace {
    pub(super) fn event(&mut self, at: SimTime, kind: &str, node: NodeId, detail: &str) {
        let _ = writeln!(self.events, "{},{kind},{},{detail}", at.as_nanos(), node.0);
    }

    pub(super) fn decision(&mut self, at: SimTime, packet: u64, node: NodeId, d: &Decision) {
        let chosen = d.next_hop.map_or(String::new(), |n| n.0.to_string());
        let metric = d.chosen_metric;
        let _ = writeln!(
            self.decisions,
            "{},{packet},{},{chosen},{:?},{metric}",
            at.as_nanos(),
            node.0,
            d.reason
        );
    }

    pub(super) fn estimator(
        &mut self,
        at: SimTime,
        from: NodeId,
        to: NodeId,
        prr: f64,
        delay: f64,
    ) {
        let _ = writeln!(
            self.estimators,
            "{},{},{},{prr},{delay}",
            at.as_nanos(),
            from.0,
            to.0
        );
    }

    pub(super) fn energy(&mut self, at: SimTime, node: NodeId, what: &str, joules: f64) {
        let _ = writeln!(self.energy, "{},{},{what},{joules}", at.as_nanos(), node.0);
    }
}
