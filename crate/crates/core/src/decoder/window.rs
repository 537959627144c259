//! 3-D window partitioning with cyclic shift, padding, and region labels.

use crate::features::Grid;

/// Label shared by all padding rows; real tokens never carry it.
pub const PAD_GROUP: u32 = u32::MAX;

/// Row layout for one windowed attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    /// Window-major rows: source token or `None` for padding.
    pub gather: Vec<Option<usize>>,
    /// For each source token, its row in `gather`.
    pub scatter: Vec<usize>,
    /// Attention labels: rows attend only rows with the same label.
    pub groups: Vec<u32>,
    pub windows: usize,
    pub window_tokens: usize,
    pub shift: (usize, usize, usize),
    pub window: (usize, usize, usize),
}

fn axis_region(s: usize, padded: usize, win: usize, shift: usize) -> u32 {
    if shift == 0 || s < padded - win {
        0
    } else if s < padded - shift {
        1
    } else {
        2
    }
}

/// Partitions `grid` into `window`-sized blocks, optionally rolled by half a window.
///
/// Axes where the window covers the whole grid are neither padded nor shifted.
pub fn window_plan(grid: Grid, window: (usize, usize, usize), shifted: bool) -> WindowPlan {
    let dims = [grid.t, grid.h, grid.w];
    let req = [window.0, window.1, window.2];
    let mut win = [0; 3];
    let mut shift = [0; 3];
    let mut padded = [0; 3];
    for a in 0..3 {
        win[a] = req[a].clamp(1, dims[a].max(1));
        shift[a] = if shifted && win[a] < dims[a] { win[a] / 2 } else { 0 };
        padded[a] = dims[a].div_ceil(win[a]) * win[a];
    }
    let counts = [padded[0] / win[0], padded[1] / win[1], padded[2] / win[2]];
    let windows = counts[0] * counts[1] * counts[2];
    let window_tokens = win[0] * win[1] * win[2];
    let mut gather = Vec::with_capacity(windows * window_tokens);
    let mut groups = Vec::with_capacity(windows * window_tokens);
    let mut scatter = vec![usize::MAX; grid.tokens()];
    for wt in 0..counts[0] {
        for wh in 0..counts[1] {
            for ww in 0..counts[2] {
                for dt in 0..win[0] {
                    for dh in 0..win[1] {
                        for dw in 0..win[2] {
                            let s = [wt * win[0] + dt, wh * win[1] + dh, ww * win[2] + dw];
                            let o: Vec<usize> = (0..3).map(|a| (s[a] + shift[a]) % padded[a]).collect();
                            let row = gather.len();
                            if o[0] < dims[0] && o[1] < dims[1] && o[2] < dims[2] {
                                let src = (o[0] * dims[1] + o[1]) * dims[2] + o[2];
                                gather.push(Some(src));
                                scatter[src] = row;
                                let r: Vec<u32> =
                                    (0..3).map(|a| axis_region(s[a], padded[a], win[a], shift[a])).collect();
                                groups.push(r[0] * 9 + r[1] * 3 + r[2]);
                            } else {
                                gather.push(None);
                                groups.push(PAD_GROUP);
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert!(scatter.iter().all(|&r| r != usize::MAX));
    WindowPlan {
        gather,
        scatter,
        groups,
        windows,
        window_tokens,
        shift: (shift[0], shift[1], shift[2]),
        window: (win[0], win[1], win[2]),
    }
}

impl WindowPlan {
    /// Whether source tokens `a` and `b` may attend each other in this pass.
    pub fn connected(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.scatter[a], self.scatter[b]);
        ra / self.window_tokens == rb / self.window_tokens && self.groups[ra] == self.groups[rb]
    }

    pub fn scatter_index(&self) -> Vec<Option<usize>> {
        self.scatter.iter().map(|&r| Some(r)).collect()
    }
}
