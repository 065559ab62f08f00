//! Paged KV layouts and the offload-time transpose between them.
//!
//! Two layouts are in play. `NHD` keeps a page token-major with shape
//! `(page_size, n_kv, head_dim)`: one token's per-head rows are adjacent,
//! but a single head's rows are strided apart. `HND` combined keeps a page
//! head-major with shape `(n_kv, 2, page_size, head_dim)`, key block then
//! value block, so everything one KV head needs from a page is a single
//! contiguous span. Host pages use the combined HND form; device pages stay
//! NHD. [`contiguous_runs`] reports the transfer units each layout yields
//! for one head, which is what the recall planner and the latency model
//! consume.

use thiserror::Error;

/// Whether an NHD page holds keys or values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageKind {
    Key,
    Value,
}

/// Per-page geometry shared by all layout math.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageGeometry {
    /// Tokens per page.
    pub page_size: usize,
    /// Number of KV heads.
    pub n_kv: usize,
    /// Elements per head row.
    pub head_dim: usize,
    /// Modeled bytes per stored element (2 or 4); used for all byte
    /// accounting even though buffers hold `f32` in memory.
    pub elem_bytes: usize,
}

impl PageGeometry {
    /// Bytes of one combined host page: `2 * p * d * n_kv * elem_bytes`.
    pub fn combined_page_bytes(&self) -> usize {
        2 * self.page_size * self.head_dim * self.n_kv * self.elem_bytes
    }

    /// Bytes of one head's share of a combined page.
    pub fn head_block_bytes(&self) -> usize {
        2 * self.page_size * self.head_dim * self.elem_bytes
    }

    /// Elements of one head's share of a combined page.
    pub fn head_block_elems(&self) -> usize {
        2 * self.page_size * self.head_dim
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Token-major page, shape `(page_size, n_kv, head_dim)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NhdPage {
    pub kind: PageKind,
    pub page_size: usize,
    pub n_kv: usize,
    pub head_dim: usize,
    data: Vec<f32>,
}

impl NhdPage {
    pub fn new(kind: PageKind, page_size: usize, n_kv: usize, head_dim: usize) -> Self {
        Self {
            kind,
            page_size,
            n_kv,
            head_dim,
            data: vec![0.0; page_size * n_kv * head_dim],
        }
    }

    pub fn from_data(
        kind: PageKind,
        page_size: usize,
        n_kv: usize,
        head_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, LayoutError> {
        if data.len() != page_size * n_kv * head_dim {
            return Err(LayoutError::DimMismatch(format!(
                "NHD page expects {} elements, got {}",
                page_size * n_kv * head_dim,
                data.len()
            )));
        }
        Ok(Self {
            kind,
            page_size,
            n_kv,
            head_dim,
            data,
        })
    }

    #[inline]
    pub fn get(&self, token: usize, kv_head: usize, channel: usize) -> f32 {
        self.data[(token * self.n_kv + kv_head) * self.head_dim + channel]
    }

    #[inline]
    pub fn set(&mut self, token: usize, kv_head: usize, channel: usize, value: f32) {
        self.data[(token * self.n_kv + kv_head) * self.head_dim + channel] = value;
    }

    /// One token's row for one head (`head_dim` elements).
    #[inline]
    pub fn token_head_row(&self, token: usize, kv_head: usize) -> &[f32] {
        let start = (token * self.n_kv + kv_head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    pub fn token_head_row_mut(&mut self, token: usize, kv_head: usize) -> &mut [f32] {
        let start = (token * self.n_kv + kv_head) * self.head_dim;
        &mut self.data[start..start + self.head_dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn same_dims(&self, other: &NhdPage) -> bool {
        self.page_size == other.page_size
            && self.n_kv == other.n_kv
            && self.head_dim == other.head_dim
    }
}

/// Head-major combined page, shape `(n_kv, 2, page_size, head_dim)`
/// row-major; axis 1 holds keys at index 0 and values at index 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HndCombinedPage {
    pub page_size: usize,
    pub n_kv: usize,
    pub head_dim: usize,
    data: Vec<f32>,
}

impl HndCombinedPage {
    pub fn new(page_size: usize, n_kv: usize, head_dim: usize) -> Self {
        Self {
            page_size,
            n_kv,
            head_dim,
            data: vec![0.0; n_kv * 2 * page_size * head_dim],
        }
    }

    #[inline]
    pub fn get(&self, kv_head: usize, kv_axis: usize, token: usize, channel: usize) -> f32 {
        self.data[self.index(kv_head, kv_axis, token, channel)]
    }

    #[inline]
    fn index(&self, kv_head: usize, kv_axis: usize, token: usize, channel: usize) -> usize {
        ((kv_head * 2 + kv_axis) * self.page_size + token) * self.head_dim + channel
    }

    /// The contiguous `2 * page_size * head_dim` span holding one head's
    /// key block followed by its value block.
    pub fn head_block(&self, kv_head: usize) -> &[f32] {
        let span = 2 * self.page_size * self.head_dim;
        &self.data[kv_head * span..(kv_head + 1) * span]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Layouts whose per-head contiguity differs; see [`contiguous_runs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    /// Token-major single K or V page, `(p, n_kv, d)`.
    Nhd,
    /// Head-major single K or V page, `(n_kv, p, d)`.
    HndSingle,
    /// Head-major combined K+V page, `(n_kv, 2, p, d)`.
    HndCombined,
}

/// One contiguous byte span inside a page, in modeled `elem_bytes` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContiguousRun {
    pub byte_offset: usize,
    pub byte_len: usize,
}

/// Interleave separate K and V token-major pages into one head-major page.
///
/// `combined(h, 0, t, c) == k(t, h, c)` and `combined(h, 1, t, c) == v(t, h, c)`.
pub fn transpose_to_hnd(
    k_page: &NhdPage,
    v_page: &NhdPage,
) -> Result<HndCombinedPage, LayoutError> {
    if !k_page.same_dims(v_page) {
        return Err(LayoutError::DimMismatch(
            "K and V pages disagree on dimensions".into(),
        ));
    }
    if k_page.kind != PageKind::Key || v_page.kind != PageKind::Value {
        return Err(LayoutError::DimMismatch(
            "expected a key page and a value page".into(),
        ));
    }
    let mut out = HndCombinedPage::new(k_page.page_size, k_page.n_kv, k_page.head_dim);
    let d = k_page.head_dim;
    for h in 0..k_page.n_kv {
        for t in 0..k_page.page_size {
            let k_dst = out.index(h, 0, t, 0);
            out.data[k_dst..k_dst + d].copy_from_slice(k_page.token_head_row(t, h));
            let v_dst = out.index(h, 1, t, 0);
            out.data[v_dst..v_dst + d].copy_from_slice(v_page.token_head_row(t, h));
        }
    }
    Ok(out)
}

/// Exact inverse of [`transpose_to_hnd`].
pub fn transpose_to_nhd(page: &HndCombinedPage) -> (NhdPage, NhdPage) {
    let mut k_page = NhdPage::new(PageKind::Key, page.page_size, page.n_kv, page.head_dim);
    let mut v_page = NhdPage::new(PageKind::Value, page.page_size, page.n_kv, page.head_dim);
    let d = page.head_dim;
    for h in 0..page.n_kv {
        for t in 0..page.page_size {
            let k_src = page.index(h, 0, t, 0);
            k_page
                .token_head_row_mut(t, h)
                .copy_from_slice(&page.data[k_src..k_src + d]);
            let v_src = page.index(h, 1, t, 0);
            v_page
                .token_head_row_mut(t, h)
                .copy_from_slice(&page.data[v_src..v_src + d]);
        }
    }
    (k_page, v_page)
}

/// The minimal sorted set of contiguous byte ranges covering one KV head's
/// data within one page of the given layout.
///
/// Adjacent element runs are merged, so an NHD page with `n_kv == 1`
/// collapses to a single run; with `n_kv >= 2` it yields `page_size` runs
/// of `head_dim * elem_bytes` bytes. Both HND forms yield exactly one run.
pub fn contiguous_runs(
    layout: LayoutKind,
    geom: &PageGeometry,
    kv_head: usize,
) -> Vec<ContiguousRun> {
    assert!(kv_head < geom.n_kv, "kv_head out of range");
    let eb = geom.elem_bytes;
    let d = geom.head_dim;
    let p = geom.page_size;
    let elem_runs: Vec<(usize, usize)> = match layout {
        LayoutKind::Nhd => (0..p).map(|t| ((t * geom.n_kv + kv_head) * d, d)).collect(),
        LayoutKind::HndSingle => vec![(kv_head * p * d, p * d)],
        LayoutKind::HndCombined => vec![(kv_head * 2 * p * d, 2 * p * d)],
    };
    let mut merged: Vec<ContiguousRun> = Vec::new();
    for (off, len) in elem_runs {
        let run = ContiguousRun {
            byte_offset: off * eb,
            byte_len: len * eb,
        };
        match merged.last_mut() {
            Some(last) if last.byte_offset + last.byte_len == run.byte_offset => {
                last.byte_len += run.byte_len;
            }
            _ => merged.push(run),
        }
    }
    merged
}
