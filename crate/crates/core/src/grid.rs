//! Spatio-temporal token grids and their window partitions.

use crate::error::{config_err, Result};

/// `(T, H, W)` extents of a token grid; tokens are flattened raster-major.
pub type Grid = [usize; 3];

pub fn grid_len(g: Grid) -> usize {
    g.iter().product()
}

/// Flat token index of grid coordinate `(t, h, w)`.
pub fn flat_index(g: Grid, c: [usize; 3]) -> usize {
    (c[0] * g[1] + c[1]) * g[2] + c[2]
}

pub fn coord_of(g: Grid, i: usize) -> [usize; 3] {
    [i / (g[1] * g[2]), (i / g[2]) % g[1], i % g[2]]
}

/// Bijective reindexing of a sequence into equal windows.
///
/// Windows are enumerated raster-major over the window grid; members of a
/// window are listed raster-major within the window. A global partition is a
/// single window holding every token in sequence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPartition {
    /// `None` for a global partition.
    pub grid: Option<Grid>,
    pub window: Option<[usize; 3]>,
    members: Vec<Vec<usize>>,
}

impl WindowPartition {
    pub fn global(n: usize) -> Self {
        WindowPartition {
            grid: None,
            window: None,
            members: vec![(0..n).collect()],
        }
    }

    pub fn new(grid: Grid, window: [usize; 3]) -> Result<Self> {
        if (0..3).any(|d| window[d] == 0 || grid[d] % window[d] != 0) {
            return config_err(format!("window {window:?} does not divide grid {grid:?}"));
        }
        let wg = [0, 1, 2].map(|d| grid[d] / window[d]);
        let mut members = Vec::with_capacity(grid_len(wg));
        for wt in 0..wg[0] {
            for wh in 0..wg[1] {
                for ww in 0..wg[2] {
                    let mut m = Vec::with_capacity(grid_len(window));
                    for t in 0..window[0] {
                        for h in 0..window[1] {
                            for w in 0..window[2] {
                                let c = [wt * window[0] + t, wh * window[1] + h, ww * window[2] + w];
                                m.push(flat_index(grid, c));
                            }
                        }
                    }
                    members.push(m);
                }
            }
        }
        Ok(WindowPartition {
            grid: Some(grid),
            window: Some(window),
            members,
        })
    }

    /// Partition for an optional window over an optional grid.
    pub fn resolve(n: usize, grid: Option<Grid>, window: Option<[usize; 3]>) -> Result<Self> {
        match (grid, window) {
            (_, None) => Ok(Self::global(n)),
            (Some(g), Some(w)) => {
                if grid_len(g) != n {
                    return config_err(format!("grid {g:?} does not hold {n} tokens"));
                }
                Self::new(g, w)
            }
            (None, Some(w)) => config_err(format!("window {w:?} needs a grid")),
        }
    }

    pub fn n_windows(&self) -> usize {
        self.members.len()
    }

    pub fn window_len(&self) -> usize {
        self.members[0].len()
    }

    pub fn n_tokens(&self) -> usize {
        self.members.len() * self.window_len()
    }

    pub fn members(&self, w: usize) -> &[usize] {
        &self.members[w]
    }

    /// Window-major concatenation of all members.
    pub fn order(&self) -> Vec<usize> {
        self.members.concat()
    }

    /// Inverse of [`Self::order`]: position of each token in the windowed layout.
    pub fn inverse(&self) -> Vec<usize> {
        let order = self.order();
        let mut inv = vec![0; order.len()];
        for (p, &t) in order.iter().enumerate() {
            inv[t] = p;
        }
        inv
    }

    /// Window owning each token.
    pub fn window_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_tokens()];
        for (w, m) in self.members.iter().enumerate() {
            for &t in m {
                out[t] = w;
            }
        }
        out
    }

    /// Extents of the window grid; `[1, 1, 1]` when global.
    pub fn window_grid(&self) -> Grid {
        match (self.grid, self.window) {
            (Some(g), Some(w)) => [0, 1, 2].map(|d| g[d] / w[d]),
            _ => [1, 1, 1],
        }
    }

    /// Integer center of window `w` in token-grid coordinates.
    pub fn center(&self, w: usize) -> [usize; 3] {
        match (self.grid, self.window) {
            (Some(_), Some(win)) => {
                let c = coord_of(self.window_grid(), w);
                [0, 1, 2].map(|d| c[d] * win[d] + (win[d] - 1) / 2)
            }
            _ => [0, 0, 0],
        }
    }
}
