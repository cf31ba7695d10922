//! Activation-memory ledger.
//!
//! Every buffer the engine keeps for the backward pass, and every transient
//! kernel workspace, is announced here with a category and the innermost
//! scope active at allocation time. Counts are logical buffer bytes, not
//! allocator or OS memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::Component;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Parameters,
    Gradients,
    Optimizer,
    Activation,
    Transient,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Parameters,
        Category::Gradients,
        Category::Optimizer,
        Category::Activation,
        Category::Transient,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Model states live across steps and are never reported as leaks.
    fn persistent(self) -> bool {
        matches!(self, Category::Parameters | Category::Optimizer)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Parameters => "parameters",
            Category::Gradients => "gradients",
            Category::Optimizer => "optimizer",
            Category::Activation => "activation",
            Category::Transient => "transient",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AllocId(pub u64);

/// Where an allocation happened: the innermost scope plus the op that made it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Site {
    pub scope: Arc<str>,
    pub layer: Option<usize>,
    pub component: Option<Component>,
    pub op: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEvent {
    pub timestamp: u64,
    pub kind: EventKind,
    pub id: AllocId,
    pub bytes: usize,
    pub category: Category,
    pub site: Site,
}

/// A scope label; unset fields inherit from the enclosing scope.
#[derive(Debug, Clone, Default)]
pub struct ScopeTag {
    pub name: String,
    pub layer: Option<usize>,
    pub component: Option<Component>,
}

impl ScopeTag {
    pub fn new(name: impl Into<String>) -> Self {
        ScopeTag { name: name.into(), layer: None, component: None }
    }

    pub fn layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    pub fn component(mut self, component: Component) -> Self {
        self.component = Some(component);
        self
    }
}

#[derive(Debug, Clone)]
struct ActiveScope {
    name: Arc<str>,
    layer: Option<usize>,
    component: Option<Component>,
}

#[derive(Debug, Clone)]
struct Live {
    bytes: usize,
    category: Category,
    site: Site,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub label: String,
    pub timestamp: u64,
    pub live_total: usize,
    pub live_by_category: BTreeMap<Category, usize>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Peaks {
    total: usize,
    by_cat: [usize; 5],
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteBytes {
    pub layer: Option<usize>,
    pub component: Option<Component>,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesPoint {
    pub timestamp: u64,
    pub live_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport {
    pub peak_total: usize,
    pub peak_by_category: BTreeMap<Category, usize>,
    /// Activation bytes allocated per (layer, component) scope.
    pub activation_by_layer: Vec<SiteBytes>,
    /// Live bytes right after the forward pass, when the run marked it.
    pub post_forward: Option<Snapshot>,
    pub series: Vec<SeriesPoint>,
    pub leaked_allocations: usize,
}

impl LedgerReport {
    pub fn activation_bytes(&self, layer: Option<usize>, component: Option<Component>) -> usize {
        self.activation_by_layer
            .iter()
            .filter(|s| s.layer == layer && s.component == component)
            .map(|s| s.bytes)
            .sum()
    }

    pub fn activation_bytes_for(&self, component: Component) -> usize {
        self.activation_by_layer
            .iter()
            .filter(|s| s.component == Some(component))
            .map(|s| s.bytes)
            .sum()
    }
}

pub const POST_FORWARD: &str = "post_forward";

#[derive(Debug, Clone)]
pub struct Ledger {
    enabled: bool,
    keep_events: bool,
    events: Vec<LedgerEvent>,
    live: HashMap<AllocId, Live>,
    next_id: u64,
    clock: u64,
    step: u64,
    live_total: usize,
    live_by_cat: [usize; 5],
    peaks: Peaks,
    window: Option<Peaks>,
    scopes: Vec<ActiveScope>,
    root: Arc<str>,
    marks: Vec<Snapshot>,
    series: Vec<SeriesPoint>,
    activation_by_site: BTreeMap<(Option<usize>, Option<Component>), usize>,
    leaked: usize,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::disabled()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Ledger {
            enabled: true,
            keep_events: true,
            events: Vec::new(),
            live: HashMap::new(),
            next_id: 1,
            clock: 0,
            step: 0,
            live_total: 0,
            live_by_cat: [0; 5],
            peaks: Peaks::default(),
            window: None,
            scopes: Vec::new(),
            root: Arc::from("root"),
            marks: Vec::new(),
            series: Vec::new(),
            activation_by_site: BTreeMap::new(),
            leaked: 0,
        }
    }

    /// A ledger that accepts every call and records nothing.
    pub fn disabled() -> Self {
        Ledger { enabled: false, ..Self::new() }
    }

    /// Keep running totals and peaks but drop the per-event log.
    pub fn without_event_log(mut self) -> Self {
        self.keep_events = false;
        self
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    fn site(&self, op: &'static str) -> Site {
        match self.scopes.last() {
            Some(s) => Site { scope: s.name.clone(), layer: s.layer, component: s.component, op },
            None => Site { scope: self.root.clone(), layer: None, component: None, op },
        }
    }

    pub fn push_scope(&mut self, tag: ScopeTag) {
        if !self.enabled {
            return;
        }
        let parent = self.scopes.last();
        let layer = tag.layer.or(parent.and_then(|p| p.layer));
        let component = tag.component.or(parent.and_then(|p| p.component));
        self.scopes.push(ActiveScope { name: Arc::from(tag.name), layer, component });
    }

    pub fn pop_scope(&mut self) {
        if self.enabled {
            self.scopes.pop();
        }
    }

    /// Runs `body` with `tag` as the innermost scope.
    pub fn scope<R>(&mut self, tag: ScopeTag, body: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(tag);
        let out = body(self);
        self.pop_scope();
        out
    }

    pub fn alloc(&mut self, bytes: usize, category: Category, op: &'static str) -> AllocId {
        if !self.enabled {
            return AllocId(0);
        }
        let id = AllocId(self.next_id);
        self.next_id += 1;
        let site = self.site(op);
        self.apply(LedgerEvent { timestamp: self.clock, kind: EventKind::Alloc, id, bytes, category, site })
            .expect("fresh allocation id cannot collide");
        id
    }

    pub fn free(&mut self, id: AllocId) -> Result<()> {
        if !self.enabled || id.0 == 0 {
            return Ok(());
        }
        let live = self
            .live
            .get(&id)
            .ok_or_else(|| Error::Accounting(format!("free of unknown allocation {}", id.0)))?;
        let ev = LedgerEvent {
            timestamp: self.clock,
            kind: EventKind::Free,
            id,
            bytes: live.bytes,
            category: live.category,
            site: live.site.clone(),
        };
        self.apply(ev)
    }

    /// Appends an externally built event, validating alloc/free pairing.
    pub fn record(&mut self, event: LedgerEvent) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if event.kind == EventKind::Alloc {
            self.next_id = self.next_id.max(event.id.0 + 1);
        }
        self.apply(event)
    }

    fn apply(&mut self, mut event: LedgerEvent) -> Result<()> {
        event.timestamp = self.clock;
        let c = event.category.index();
        match event.kind {
            EventKind::Alloc => {
                if self.live.contains_key(&event.id) {
                    return Err(Error::Accounting(format!("allocation id {} already live", event.id.0)));
                }
                self.live.insert(
                    event.id,
                    Live { bytes: event.bytes, category: event.category, site: event.site.clone() },
                );
                self.live_total += event.bytes;
                self.live_by_cat[c] += event.bytes;
                if event.category == Category::Activation {
                    *self
                        .activation_by_site
                        .entry((event.site.layer, event.site.component))
                        .or_default() += event.bytes;
                }
                self.peaks.total = self.peaks.total.max(self.live_total);
                self.peaks.by_cat[c] = self.peaks.by_cat[c].max(self.live_by_cat[c]);
                if let Some(w) = &mut self.window {
                    w.total = w.total.max(self.live_total);
                    w.by_cat[c] = w.by_cat[c].max(self.live_by_cat[c]);
                }
            }
            EventKind::Free => {
                let live = self.live.remove(&event.id).ok_or_else(|| {
                    Error::Accounting(format!("free without matching alloc (id {})", event.id.0))
                })?;
                if live.bytes != event.bytes || live.category != event.category {
                    return Err(Error::Accounting(format!(
                        "free of id {} does not match its allocation ({} {} vs {} {})",
                        event.id.0, live.bytes, live.category, event.bytes, event.category
                    )));
                }
                self.live_total -= live.bytes;
                self.live_by_cat[c] -= live.bytes;
            }
        }
        self.series.push(SeriesPoint { timestamp: self.clock, live_bytes: self.live_total });
        self.clock += 1;
        if self.keep_events {
            self.events.push(event);
        }
        Ok(())
    }

    /// Moves a live allocation to another category (e.g. a forward value the
    /// tape decides to keep for backward). Recorded as a free plus an alloc.
    pub fn reclassify(&mut self, id: AllocId, category: Category, op: &'static str) -> Result<AllocId> {
        if !self.enabled || id.0 == 0 {
            return Ok(AllocId(0));
        }
        let bytes = self
            .live
            .get(&id)
            .map(|l| l.bytes)
            .ok_or_else(|| Error::Accounting(format!("reclassify of unknown allocation {}", id.0)))?;
        self.free(id)?;
        Ok(self.alloc(bytes, category, op))
    }

    pub fn live_bytes(&self) -> usize {
        self.live_total
    }

    pub fn live_bytes_in(&self, category: Category) -> usize {
        self.live_by_cat[category.index()]
    }

    pub fn peak_bytes(&self) -> usize {
        self.peaks.total
    }

    pub fn peak_bytes_in(&self, category: Category) -> usize {
        self.peaks.by_cat[category.index()]
    }

    /// Starts a measurement window whose peaks are tracked separately.
    pub fn open_window(&mut self) {
        self.window = Some(Peaks { total: self.live_total, by_cat: self.live_by_cat });
    }

    /// Closes the window, returning (peak total, peak per category) inside it.
    pub fn close_window(&mut self) -> (usize, BTreeMap<Category, usize>) {
        let w = self.window.take().unwrap_or_default();
        (w.total, Category::ALL.iter().map(|c| (*c, w.by_cat[c.index()])).collect())
    }

    pub fn mark(&mut self, label: impl Into<String>) {
        if !self.enabled {
            return;
        }
        self.marks.push(Snapshot {
            label: label.into(),
            timestamp: self.clock,
            live_total: self.live_total,
            live_by_category: Category::ALL.iter().map(|c| (*c, self.live_by_cat[c.index()])).collect(),
        });
    }

    pub fn marks(&self) -> &[Snapshot] {
        &self.marks
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Closes a training step: every non-persistent allocation still live is
    /// reported as leaked.
    pub fn end_step(&mut self) -> Vec<LedgerEvent> {
        let mut leaked: Vec<LedgerEvent> = self
            .live
            .iter()
            .filter(|(_, l)| !l.category.persistent())
            .map(|(id, l)| LedgerEvent {
                timestamp: self.clock,
                kind: EventKind::Alloc,
                id: *id,
                bytes: l.bytes,
                category: l.category,
                site: l.site.clone(),
            })
            .collect();
        leaked.sort_by_key(|e| e.id);
        self.leaked += leaked.len();
        self.step += 1;
        leaked
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            peak_total: self.peaks.total,
            peak_by_category: Category::ALL.iter().map(|c| (*c, self.peaks.by_cat[c.index()])).collect(),
            activation_by_layer: self
                .activation_by_site
                .iter()
                .map(|((layer, component), bytes)| SiteBytes { layer: *layer, component: *component, bytes: *bytes })
                .collect(),
            post_forward: self.marks.iter().rev().find(|m| m.label == POST_FORWARD).cloned(),
            series: self.series.clone(),
            leaked_allocations: self.leaked,
        }
    }
}

/// Memory for parameters, gradients and AdamW states under mixed precision:
/// 2ψ (half params) + 2ψ (half grads) + 4ψ·3 (fp32 params, momentum, variance).
pub fn model_states_bytes(param_count: u64) -> u64 {
    16 * param_count
}
