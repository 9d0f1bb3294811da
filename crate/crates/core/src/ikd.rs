//! Incremental 3D k-d tree for the plane-point map.
//!
//! Inserts descend to a leaf. After each insert the path from the root is
//! checked and the topmost subtree that is too deep (height above
//! `2·log₂(size) + 4`) or holds too many deleted nodes (live/total below
//! [`DELETE_RATIO`]) is rebuilt balanced. Deletion is lazy.
//!
//! `&self` queries may run concurrently; `insert` and `remove_beyond` take
//! `&mut self`, which gives the single-writer contract.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::exec::Exec;
use crate::geometry::Vec3;

pub const DELETE_RATIO: f64 = 0.6;
pub const DEDUP_RADIUS: f64 = 0.05;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    point: Vec3,
    axis: u8,
    left: u32,
    right: u32,
    deleted: bool,
    /// nodes in the subtree, deleted ones included
    size: u32,
    live: u32,
    height: u32,
    lo: Vec3,
    hi: Vec3,
}

#[derive(Debug, Clone, Default)]
pub struct IkdTree {
    nodes: Vec<Node>,
    root: u32,
    garbage: usize,
    rebuilds: usize,
}

/// Neighbour ordering: squared distance, then lexicographic coordinates.
fn key_cmp(a: &(f64, Vec3), b: &(f64, Vec3)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.x.total_cmp(&b.1.x))
        .then(a.1.y.total_cmp(&b.1.y))
        .then(a.1.z.total_cmp(&b.1.z))
}

struct HeapItem(f64, Vec3);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        key_cmp(&(self.0, self.1), &(other.0, other.1))
    }
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

fn box_dist2(q: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if q[k] < lo[k] {
            lo[k] - q[k]
        } else if q[k] > hi[k] {
            q[k] - hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

fn box_max_dist2(q: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = (q[k] - lo[k]).abs().max((q[k] - hi[k]).abs());
        d += v * v;
    }
    d
}

fn depth_limit(size: u32) -> f64 {
    2.0 * (size.max(1) as f64).log2() + 4.0
}

impl IkdTree {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            root: NIL,
            garbage: 0,
            rebuilds: 0,
        }
    }

    /// Balanced static build without deduplication.
    pub fn build(points: &[Vec3]) -> Self {
        let mut t = Self::new();
        let mut pts: Vec<Vec3> = points
            .iter()
            .copied()
            .filter(|p| p.iter().all(|v| v.is_finite()))
            .collect();
        t.root = t.build_balanced(&mut pts);
        t
    }

    /// Number of live points.
    pub fn len(&self) -> usize {
        if self.root == NIL {
            0
        } else {
            self.nodes[self.root as usize].live as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Height of the tree (0 when empty).
    pub fn height(&self) -> usize {
        if self.root == NIL {
            0
        } else {
            self.nodes[self.root as usize].height as usize
        }
    }

    pub fn rebuild_count(&self) -> usize {
        self.rebuilds
    }

    fn build_balanced(&mut self, pts: &mut [Vec3]) -> u32 {
        if pts.is_empty() {
            return NIL;
        }
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let spread = hi - lo;
        let axis = if spread.x >= spread.y && spread.x >= spread.z {
            0
        } else if spread.y >= spread.z {
            1
        } else {
            2
        };
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let point = pts[mid];
        let (left_pts, rest) = pts.split_at_mut(mid);
        let right_pts = &mut rest[1..];
        let left = self.build_balanced(left_pts);
        let right = self.build_balanced(right_pts);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left,
            right,
            deleted: false,
            size: 0,
            live: 0,
            height: 0,
            lo,
            hi,
        });
        self.refresh(idx);
        idx
    }

    fn refresh(&mut self, idx: u32) {
        let (l, r) = {
            let n = &self.nodes[idx as usize];
            (n.left, n.right)
        };
        let mut size = 1;
        let mut live = if self.nodes[idx as usize].deleted {
            0
        } else {
            1
        };
        let mut height = 0;
        let mut lo = self.nodes[idx as usize].point;
        let mut hi = lo;
        for c in [l, r] {
            if c != NIL {
                let cn = &self.nodes[c as usize];
                size += cn.size;
                live += cn.live;
                height = height.max(cn.height);
                lo = lo.inf(&cn.lo);
                hi = hi.sup(&cn.hi);
            }
        }
        let n = &mut self.nodes[idx as usize];
        n.size = size;
        n.live = live;
        n.height = height + 1;
        n.lo = lo;
        n.hi = hi;
    }

    fn collect_live(&self, idx: u32, out: &mut Vec<Vec3>) {
        if idx == NIL {
            return;
        }
        let n = &self.nodes[idx as usize];
        self.collect_live(n.left, out);
        if !n.deleted {
            out.push(n.point);
        }
        self.collect_live(n.right, out);
    }

    pub fn points(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        self.collect_live(self.root, &mut out);
        out
    }

    fn rebuild_subtree(&mut self, idx: u32) -> u32 {
        let mut pts = Vec::new();
        self.collect_live(idx, &mut pts);
        self.garbage += self.nodes[idx as usize].size as usize;
        self.rebuilds += 1;
        self.build_balanced(&mut pts)
    }

    fn compact_if_needed(&mut self) {
        if self.garbage > 1024 && self.garbage > self.nodes.len() / 2 {
            let mut pts = self.points();
            self.nodes.clear();
            self.garbage = 0;
            self.root = NIL;
            self.root = self.build_balanced(&mut pts);
        }
    }

    fn needs_rebuild(&self, idx: u32) -> bool {
        let n = &self.nodes[idx as usize];
        if n.size >= 8 && (n.live as f64) < DELETE_RATIO * n.size as f64 {
            return true;
        }
        n.height as f64 > depth_limit(n.live)
    }

    /// True when a live point lies strictly within `radius` of `q`.
    pub fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        let r2 = radius * radius;
        let mut stack = Vec::with_capacity(64);
        if self.root != NIL {
            stack.push(self.root);
        }
        while let Some(idx) = stack.pop() {
            let n = &self.nodes[idx as usize];
            if n.live == 0 || box_dist2(q, &n.lo, &n.hi) >= r2 {
                continue;
            }
            if !n.deleted && dist2(&n.point, q) < r2 {
                return true;
            }
            if n.left != NIL {
                stack.push(n.left);
            }
            if n.right != NIL {
                stack.push(n.right);
            }
        }
        false
    }

    /// Inserts points, skipping non-finite ones and any closer than
    /// [`DEDUP_RADIUS`] to a live point. Returns how many were added.
    pub fn insert(&mut self, points: &[Vec3]) -> usize {
        let mut added = 0;
        for p in points {
            if !p.iter().all(|v| v.is_finite()) || self.any_within(p, DEDUP_RADIUS) {
                continue;
            }
            self.insert_one(*p);
            added += 1;
        }
        self.compact_if_needed();
        added
    }

    fn insert_one(&mut self, p: Vec3) {
        let new_idx = self.nodes.len() as u32;
        if self.root == NIL {
            self.nodes.push(Node {
                point: p,
                axis: 0,
                left: NIL,
                right: NIL,
                deleted: false,
                size: 1,
                live: 1,
                height: 1,
                lo: p,
                hi: p,
            });
            self.root = new_idx;
            return;
        }
        let mut path = Vec::with_capacity(32);
        let mut cur = self.root;
        loop {
            path.push(cur);
            let n = &self.nodes[cur as usize];
            let axis = n.axis as usize;
            let next = if p[axis] < n.point[axis] {
                n.left
            } else {
                n.right
            };
            if next == NIL {
                break;
            }
            cur = next;
        }
        let parent = *path.last().unwrap();
        let axis = (self.nodes[parent as usize].axis + 1) % 3;
        self.nodes.push(Node {
            point: p,
            axis,
            left: NIL,
            right: NIL,
            deleted: false,
            size: 1,
            live: 1,
            height: 1,
            lo: p,
            hi: p,
        });
        {
            let pn = &mut self.nodes[parent as usize];
            if p[pn.axis as usize] < pn.point[pn.axis as usize] {
                pn.left = new_idx;
            } else {
                pn.right = new_idx;
            }
        }
        for &idx in path.iter().rev() {
            self.refresh(idx);
        }
        // rebuild the topmost unbalanced subtree on the path
        for (depth, &idx) in path.iter().enumerate() {
            if self.needs_rebuild(idx) {
                let new_sub = self.rebuild_subtree(idx);
                if depth == 0 {
                    self.root = new_sub;
                } else {
                    let parent = path[depth - 1];
                    let pn = &mut self.nodes[parent as usize];
                    if pn.left == idx {
                        pn.left = new_sub;
                    } else {
                        pn.right = new_sub;
                    }
                    for &up in path[..depth].iter().rev() {
                        self.refresh(up);
                    }
                }
                break;
            }
        }
    }

    /// The `k` nearest live points, ascending by squared distance with ties
    /// broken by lexicographic coordinates.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<(Vec3, f64)> {
        if k == 0 || self.root == NIL {
            return Vec::new();
        }
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        let mut out: Vec<(f64, Vec3)> = heap.into_iter().map(|h| (h.0, h.1)).collect();
        out.sort_by(key_cmp);
        out.into_iter().map(|(d, p)| (p, d)).collect()
    }

    fn knn_rec(&self, idx: u32, q: &Vec3, k: usize, heap: &mut BinaryHeap<HeapItem>) {
        let n = &self.nodes[idx as usize];
        if n.live == 0 {
            return;
        }
        if heap.len() == k && box_dist2(q, &n.lo, &n.hi) > heap.peek().unwrap().0 {
            return;
        }
        if !n.deleted {
            let item = HeapItem(dist2(&n.point, q), n.point);
            if heap.len() < k {
                heap.push(item);
            } else if item < *heap.peek().unwrap() {
                heap.pop();
                heap.push(item);
            }
        }
        let axis = n.axis as usize;
        let (first, second) = if q[axis] < n.point[axis] {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if first != NIL {
            self.knn_rec(first, q, k, heap);
        }
        if second != NIL {
            self.knn_rec(second, q, k, heap);
        }
    }

    pub fn knn_batch(&self, queries: &[Vec3], k: usize, exec: Exec) -> Vec<Vec<(Vec3, f64)>> {
        exec.map_slice(queries, |q| self.knn(q, k))
    }

    /// Lazily deletes every live point farther than `radius` from `center`.
    pub fn remove_beyond(&mut self, center: &Vec3, radius: f64) -> usize {
        if self.root == NIL || !(radius > 0.0) {
            return 0;
        }
        let removed = self.remove_rec(self.root, center, radius * radius);
        if removed > 0 {
            self.root = self.rebalance_rec(self.root);
            self.compact_if_needed();
        }
        removed
    }

    fn remove_rec(&mut self, idx: u32, c: &Vec3, r2: f64) -> usize {
        let (lo, hi, live, left, right) = {
            let n = &self.nodes[idx as usize];
            (n.lo, n.hi, n.live, n.left, n.right)
        };
        if live == 0 || box_max_dist2(c, &lo, &hi) <= r2 {
            return 0;
        }
        let mut removed = 0;
        {
            let n = &mut self.nodes[idx as usize];
            if !n.deleted && dist2(&n.point, c) > r2 {
                n.deleted = true;
                removed += 1;
            }
        }
        if left != NIL {
            removed += self.remove_rec(left, c, r2);
        }
        if right != NIL {
            removed += self.remove_rec(right, c, r2);
        }
        self.refresh(idx);
        removed
    }

    fn rebalance_rec(&mut self, idx: u32) -> u32 {
        if idx == NIL {
            return NIL;
        }
        if self.nodes[idx as usize].live == 0 {
            self.garbage += self.nodes[idx as usize].size as usize;
            return NIL;
        }
        if self.needs_rebuild(idx) {
            return self.rebuild_subtree(idx);
        }
        let (l, r) = (
            self.nodes[idx as usize].left,
            self.nodes[idx as usize].right,
        );
        let nl = self.rebalance_rec(l);
        let nr = self.rebalance_rec(r);
        {
            let n = &mut self.nodes[idx as usize];
            n.left = nl;
            n.right = nr;
        }
        self.refresh(idx);
        idx
    }

    /// Every live point can be found by split-plane descent, and cached
    /// counters match a full recount.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.root == NIL {
            return Ok(());
        }
        self.check_rec(self.root)?;
        for p in self.points() {
            if !self.reachable(&p) {
                return Err(format!("point {p:?} not reachable"));
            }
        }
        Ok(())
    }

    fn check_rec(&self, idx: u32) -> Result<(u32, u32, u32), String> {
        let n = &self.nodes[idx as usize];
        let mut size = 1;
        let mut live = if n.deleted { 0 } else { 1 };
        let mut height = 0;
        for c in [n.left, n.right] {
            if c != NIL {
                let (s, l, h) = self.check_rec(c)?;
                size += s;
                live += l;
                height = height.max(h);
            }
        }
        if n.size != size || n.live != live || n.height != height + 1 {
            return Err(format!(
                "counter mismatch at node {idx}: cached ({}, {}, {}), actual ({size}, {live}, {})",
                n.size,
                n.live,
                n.height,
                height + 1
            ));
        }
        Ok((size, live, height + 1))
    }

    fn reachable(&self, p: &Vec3) -> bool {
        let mut stack = vec![self.root];
        while let Some(idx) = stack.pop() {
            if idx == NIL {
                continue;
            }
            let n = &self.nodes[idx as usize];
            if !n.deleted && n.point == *p {
                return true;
            }
            let axis = n.axis as usize;
            match p[axis].total_cmp(&n.point[axis]) {
                Ordering::Less => stack.push(n.left),
                Ordering::Greater => stack.push(n.right),
                Ordering::Equal => {
                    stack.push(n.left);
                    stack.push(n.right);
                }
            }
        }
        false
    }

    /// Live points as `x y z` lines.
    pub fn dump_xyz(&self) -> String {
        let mut s = String::new();
        for p in self.points() {
            s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
        }
        s
    }
}
