//! Resolution-configurable floor plan grids, seating and proximity queries.
//!
//! Cells are labelled row-major: cell `(col, row)` is `grid_k` with
//! `k = row * cols + col`. Distances are Euclidean between cell centers,
//! where the center of `(c, r)` is `((c + 0.5) * s, (r + 0.5) * s)`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::clock::{serde_ms, Timestamp};
use crate::error::{Error, Result};
use crate::ids::{DeviceId, MemberId, PlanId, SeatId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub col: u32,
    pub row: u32,
}

impl GridCell {
    pub const fn new(col: u32, row: u32) -> Self {
        GridCell { col, row }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub plan_id: PlanId,
    pub name: String,
    pub cell_size_m: f64,
    pub cols: u32,
    pub rows: u32,
}

impl FloorPlan {
    pub fn new(name: impl Into<String>, cell_size_m: f64, cols: u32, rows: u32) -> Result<Self> {
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::InvalidDimensions(format!("cell_size_m must be positive, got {cell_size_m}")));
        }
        if cols == 0 || rows == 0 {
            return Err(Error::InvalidDimensions(format!("grid must be at least 1x1, got {cols}x{rows}")));
        }
        Ok(FloorPlan { plan_id: PlanId::generate(), name: name.into(), cell_size_m, cols, rows })
    }

    pub fn cell_count(&self) -> u64 {
        u64::from(self.cols) * u64::from(self.rows)
    }

    pub fn contains(&self, cell: GridCell) -> bool {
        cell.col < self.cols && cell.row < self.rows
    }

    pub fn check(&self, cell: GridCell) -> Result<GridCell> {
        if self.contains(cell) {
            Ok(cell)
        } else {
            Err(Error::OutOfBounds { col: cell.col.into(), row: cell.row.into() })
        }
    }

    pub fn label(&self, cell: GridCell) -> String {
        format!("grid_{}", u64::from(cell.row) * u64::from(self.cols) + u64::from(cell.col))
    }

    /// Inverse of [`FloorPlan::label`].
    pub fn parse_label(&self, label: &str) -> Option<GridCell> {
        let k: u64 = label.strip_prefix("grid_")?.parse().ok()?;
        if k >= self.cell_count() {
            return None;
        }
        let cols = u64::from(self.cols);
        Some(GridCell::new((k % cols) as u32, (k / cols) as u32))
    }

    pub fn cell_center(&self, cell: GridCell) -> (f64, f64) {
        let s = self.cell_size_m;
        ((f64::from(cell.col) + 0.5) * s, (f64::from(cell.row) + 0.5) * s)
    }

    /// Coarsens a metric coordinate into the cell containing it.
    pub fn snap_to_grid(&self, x_m: f64, y_m: f64) -> Result<GridCell> {
        let s = self.cell_size_m;
        let width = f64::from(self.cols) * s;
        let height = f64::from(self.rows) * s;
        if !(x_m >= 0.0 && x_m < width && y_m >= 0.0 && y_m < height) {
            return Err(Error::CoordinateOutOfBounds { x: x_m, y: y_m });
        }
        // Float division can land exactly on the upper edge for x just below width.
        let col = ((x_m / s).floor() as u32).min(self.cols - 1);
        let row = ((y_m / s).floor() as u32).min(self.rows - 1);
        Ok(GridCell::new(col, row))
    }

    pub fn distance_m(&self, a: GridCell, b: GridCell) -> f64 {
        let (ax, ay) = self.cell_center(a);
        let (bx, by) = self.cell_center(b);
        (ax - bx).hypot(ay - by)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatAssignment {
    pub seat_id: SeatId,
    pub member_id: MemberId,
    pub plan_id: PlanId,
    pub cell: GridCell,
    #[serde(with = "serde_ms")]
    pub valid_from: Timestamp,
    #[serde(default, with = "serde_ms::option")]
    pub valid_to: Option<Timestamp>,
}

impl SeatAssignment {
    pub fn is_open(&self) -> bool {
        self.valid_to.is_none()
    }

    fn overlaps(&self, from: Timestamp, to: Option<Timestamp>) -> bool {
        let starts_before_other_ends = to.is_none_or(|t| self.valid_from < t);
        let other_starts_before_end = self.valid_to.is_none_or(|end| from < end);
        starts_before_other_ends && other_starts_before_end
    }
}

/// Bucketed positions of devices on one plan.
#[derive(Debug, Default, Clone)]
pub struct CellIndex {
    buckets: HashMap<GridCell, Vec<DeviceId>>,
}

impl CellIndex {
    pub fn insert(&mut self, cell: GridCell, device: DeviceId) {
        self.buckets.entry(cell).or_default().push(device);
    }

    /// Devices whose cell center lies within `radius_m` of `origin`'s center.
    /// Only cells inside the bounding square of the radius are visited.
    pub fn within(&self, plan: &FloorPlan, origin: GridCell, radius_m: f64) -> Vec<DeviceId> {
        if !(radius_m >= 0.0) {
            return Vec::new();
        }
        let reach = (radius_m / plan.cell_size_m).floor() as i64;
        let (c0, r0) = (i64::from(origin.col), i64::from(origin.row));
        let mut hits = Vec::new();
        for row in (r0 - reach).max(0)..=(r0 + reach).min(i64::from(plan.rows) - 1) {
            for col in (c0 - reach).max(0)..=(c0 + reach).min(i64::from(plan.cols) - 1) {
                let cell = GridCell::new(col as u32, row as u32);
                let Some(devices) = self.buckets.get(&cell) else { continue };
                if plan.distance_m(origin, cell) <= radius_m {
                    hits.extend(devices.iter().cloned());
                }
            }
        }
        hits.sort();
        hits
    }
}

/// Plans and seat assignments.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Floorplans {
    plans: BTreeMap<PlanId, FloorPlan>,
    seats: BTreeMap<SeatId, SeatAssignment>,
}

impl Floorplans {
    pub fn insert_plan(&mut self, plan: FloorPlan) -> FloorPlan {
        self.plans.insert(plan.plan_id.clone(), plan.clone());
        plan
    }

    pub fn plan(&self, id: &PlanId) -> Result<&FloorPlan> {
        self.plans.get(id).ok_or_else(|| Error::not_found("floorplan", id.as_str()))
    }

    pub fn plans(&self) -> impl Iterator<Item = &FloorPlan> {
        self.plans.values()
    }

    pub fn plan_count(&self) -> usize {
        self.plans.len()
    }

    pub fn assign_seat(
        &mut self,
        member_id: MemberId,
        plan_id: PlanId,
        cell: GridCell,
        valid_from: Timestamp,
        valid_to: Option<Timestamp>,
    ) -> Result<SeatAssignment> {
        self.plan(&plan_id)?.check(cell)?;
        if valid_to.is_some_and(|t| t <= valid_from) {
            return Err(Error::InvalidWindow("valid_to must follow valid_from".into()));
        }
        if let Some(clash) = self
            .seats
            .values()
            .find(|s| s.member_id == member_id && s.plan_id == plan_id && s.overlaps(valid_from, valid_to))
        {
            return Err(Error::SeatConflict(clash.seat_id.to_string()));
        }
        let seat = SeatAssignment { seat_id: SeatId::generate(), member_id, plan_id, cell, valid_from, valid_to };
        self.seats.insert(seat.seat_id.clone(), seat.clone());
        Ok(seat)
    }

    pub fn seat(&self, id: &SeatId) -> Result<&SeatAssignment> {
        self.seats.get(id).ok_or_else(|| Error::not_found("seat", id.as_str()))
    }

    pub fn end_seat(&mut self, id: &SeatId, at: Timestamp) -> Result<SeatAssignment> {
        let seat = self.seats.get_mut(id).ok_or_else(|| Error::not_found("seat", id.as_str()))?;
        if at <= seat.valid_from {
            return Err(Error::InvalidWindow("seat cannot end before it starts".into()));
        }
        seat.valid_to = Some(at);
        Ok(seat.clone())
    }

    pub fn remove_seat(&mut self, id: &SeatId) -> Option<SeatAssignment> {
        self.seats.remove(id)
    }

    pub fn seats(&self) -> impl Iterator<Item = &SeatAssignment> {
        self.seats.values()
    }

    pub fn seats_of<'a>(&'a self, member: &'a MemberId) -> impl Iterator<Item = &'a SeatAssignment> + 'a {
        self.seats.values().filter(move |s| &s.member_id == member)
    }

    pub fn open_seats_of<'a>(&'a self, member: &'a MemberId) -> impl Iterator<Item = &'a SeatAssignment> + 'a {
        self.seats_of(member).filter(|s| s.is_open())
    }

    /// Removes and returns every seat held by a member.
    pub fn remove_member_seats(&mut self, member: &MemberId) -> Vec<SeatId> {
        let ids: Vec<SeatId> = self.seats_of(member).map(|s| s.seat_id.clone()).collect();
        for id in &ids {
            self.seats.remove(id);
        }
        ids
    }

    /// Devices on the same plan as any of the member's open seats, within
    /// `radius_m` of that seat. `located` yields `(device, plan, cell)`.
    pub fn devices_within_radius<'a, I>(&self, member: &MemberId, radius_m: f64, located: I) -> Result<Vec<DeviceId>>
    where
        I: IntoIterator<Item = (&'a DeviceId, &'a PlanId, GridCell)>,
    {
        let open: Vec<&SeatAssignment> = self.open_seats_of(member).collect();
        if open.is_empty() {
            return Err(Error::NoSeat);
        }
        let mut per_plan: HashMap<&PlanId, CellIndex> = HashMap::new();
        for (device, plan, cell) in located {
            per_plan.entry(plan).or_default().insert(cell, device.clone());
        }
        let mut out = Vec::new();
        for seat in open {
            let (Ok(plan), Some(index)) = (self.plan(&seat.plan_id), per_plan.get(&seat.plan_id)) else {
                continue;
            };
            out.extend(index.within(plan, seat.cell, radius_m));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}
