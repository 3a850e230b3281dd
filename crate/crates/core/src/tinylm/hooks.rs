use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

/// Rewrites one residual-stream vector in place.
pub trait ResidualEdit: Send + Sync {
    fn edit(&self, position: usize, residual: &mut [f64]);
}

impl<T> ResidualEdit for T
where
    T: Fn(usize, &mut [f64]) + Send + Sync,
{
    fn edit(&self, position: usize, residual: &mut [f64]) {
        self(position, residual)
    }
}

#[derive(Clone, Default)]
pub enum PositionFilter {
    #[default]
    All,
    Only(BTreeSet<usize>),
    Predicate(Arc<dyn Fn(usize) -> bool + Send + Sync>),
}

impl PositionFilter {
    pub fn accepts(&self, position: usize) -> bool {
        match self {
            PositionFilter::All => true,
            PositionFilter::Only(set) => set.contains(&position),
            PositionFilter::Predicate(f) => f(position),
        }
    }
}

impl fmt::Debug for PositionFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionFilter::All => write!(f, "All"),
            PositionFilter::Only(s) => f.debug_tuple("Only").field(s).finish(),
            PositionFilter::Predicate(_) => write!(f, "Predicate(..)"),
        }
    }
}

/// Replaces the residual stream at the output of block `layer` for every
/// position the filter accepts, then the forward pass continues from the
/// edited values. Residuals are handed to the edit as `f64`.
#[derive(Clone)]
pub struct InterventionHook {
    pub layer: usize,
    pub positions: PositionFilter,
    pub edit: Arc<dyn ResidualEdit>,
}

impl InterventionHook {
    pub fn new(layer: usize, edit: impl ResidualEdit + 'static) -> Self {
        Self {
            layer,
            positions: PositionFilter::All,
            edit: Arc::new(edit),
        }
    }

    pub fn identity(layer: usize) -> Self {
        Self::new(layer, |_: usize, _: &mut [f64]| {})
    }

    pub fn with_positions(mut self, positions: PositionFilter) -> Self {
        self.positions = positions;
        self
    }
}

impl fmt::Debug for InterventionHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InterventionHook")
            .field("layer", &self.layer)
            .field("positions", &self.positions)
            .finish_non_exhaustive()
    }
}
