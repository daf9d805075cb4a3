use std::fmt;

use mmpack::projector::{pool_windows, token_budget, PoolSpec, TokenMode, ENCODER_GRID_SIDE};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSummary {
    pub images: usize,
    pub mode: TokenMode,
    pub grid_side: usize,
    pub pool_side: usize,
    pub tokens_per_image: usize,
    pub total_tokens: usize,
    /// Per-axis windows `(start, end)` when requested.
    pub windows: Option<Vec<(usize, usize)>>,
}

pub fn run(
    images: usize,
    mode: TokenMode,
    grid_side: usize,
    pool_side: usize,
    show_windows: bool,
) -> Result<BudgetSummary, CliError> {
    let windows = pool_windows(grid_side, pool_side).map_err(|e| CliError::Usage(e.to_string()))?;
    if mode == TokenMode::Sft && grid_side != ENCODER_GRID_SIDE {
        return Err(CliError::Usage(format!(
            "sft mode uses the full {ENCODER_GRID_SIDE}x{ENCODER_GRID_SIDE} grid"
        )));
    }
    let spec = PoolSpec {
        target_side: pool_side,
    };
    let axis = show_windows.then(|| {
        windows
            .iter()
            .take(pool_side)
            .map(|(_, cols)| (cols.start, cols.end))
            .collect()
    });
    Ok(BudgetSummary {
        images,
        mode,
        grid_side,
        pool_side,
        tokens_per_image: token_budget(1, spec, mode),
        total_tokens: token_budget(images, spec, mode),
        windows: axis,
    })
}

impl fmt::Display for BudgetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (g, p) = (self.grid_side, self.pool_side);
        match self.mode {
            TokenMode::Pretrain => {
                writeln!(f, "mode             pretrain ({g}x{g} pooled to {p}x{p})")?
            }
            TokenMode::Sft => writeln!(f, "mode             sft ({g}x{g}, no pooling)")?,
        }
        writeln!(f, "tokens/image     {}", self.tokens_per_image)?;
        writeln!(f, "images           {}", self.images)?;
        write!(f, "visual tokens    {}", self.total_tokens)?;
        if let Some(w) = &self.windows {
            write!(f, "\nwindows (per axis)")?;
            for (i, (start, end)) in w.iter().enumerate() {
                write!(f, "\n  {i:>3}: [{start}, {end})")?;
            }
        }
        Ok(())
    }
}
