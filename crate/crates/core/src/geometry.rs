//! Box arithmetic and the pairwise relation predicates between a reference
//! box and another box in the same image.
//!
//! Coordinates are image pixels with the origin at the top-left corner and
//! `y` growing downward, so "above" means a smaller `y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x, y, w, h]: [f64; 4]) -> Result<Self> {
        BBox::new(x, y, w, h)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Four independent direction bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directions {
    pub above: bool,
    pub below: bool,
    pub left: bool,
    pub right: bool,
}

/// Edge-based relations: the reference lies entirely above / below / left of /
/// right of the other box.
pub fn boundary_relations(r: &BBox, o: &BBox) -> Directions {
    Directions {
        above: r.bottom() < o.y,
        below: r.y > o.bottom(),
        left: r.right() < o.x,
        right: r.x > o.right(),
    }
}

/// How the central relations compute a box's "middle" coordinate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralMode {
    /// `(y + h) * 0.5`, exactly as the relation table writes it.
    #[default]
    Literal,
    /// The geometric center `y + h / 2`.
    Center,
}

/// Midpoint relations, each guarded by an edge condition.
pub fn central_relations(r: &BBox, o: &BBox, mode: CentralMode) -> Directions {
    let mid = |start: f64, len: f64| match mode {
        CentralMode::Literal => (start + len) * 0.5,
        CentralMode::Center => start + len * 0.5,
    };
    let (ry, oy) = (mid(r.y, r.h), mid(o.y, o.h));
    let (rx, ox) = (mid(r.x, r.w), mid(o.x, o.w));
    Directions {
        above: ry < oy && r.y < o.y,
        below: ry > oy && r.bottom() > o.bottom(),
        left: rx < ox && r.x < o.x,
        right: rx > ox && r.right() > o.right(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    Near,
    Far,
}

/// Compares the horizontal gap from the reference's left edge to the other
/// box's right edge against the reference diagonal. Equality counts as near.
pub fn distance_relation(r: &BBox, o: &BBox) -> Distance {
    if r.x - o.right() <= r.diagonal() {
        Distance::Near
    } else {
        Distance::Far
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Overlapping iff IoU reaches the configured threshold.
    #[default]
    IouThreshold,
    /// Overlapping iff the boxes share any area.
    AnyPositive,
}

pub fn overlap_relation(r: &BBox, o: &BBox, mode: OverlapMode, threshold: f64) -> bool {
    let v = iou(r, o);
    match mode {
        OverlapMode::IouThreshold => v >= threshold,
        OverlapMode::AnyPositive => v > 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Larger,
    Smaller,
    Equal,
}

/// Diagonal comparison with a relative tolerance for `Equal`.
pub fn scale_relation(r: &BBox, o: &BBox, eps: f64) -> Scale {
    let (dr, d_o) = (r.diagonal(), o.diagonal());
    if (dr - d_o).abs() <= eps * dr.max(d_o) {
        Scale::Equal
    } else if dr > d_o {
        Scale::Larger
    } else {
        Scale::Smaller
    }
}

/// One of the six relation families, in feature-layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationFamily {
    Cooccurrence,
    Overlap,
    Scale,
    Boundary,
    Central,
    Distance,
}

impl RelationFamily {
    pub const ALL: [RelationFamily; 6] = [
        RelationFamily::Cooccurrence,
        RelationFamily::Overlap,
        RelationFamily::Scale,
        RelationFamily::Boundary,
        RelationFamily::Central,
        RelationFamily::Distance,
    ];

    pub fn width(self) -> usize {
        match self {
            RelationFamily::Cooccurrence => 1,
            RelationFamily::Overlap => 2,
            RelationFamily::Scale => 3,
            RelationFamily::Boundary => 4,
            RelationFamily::Central => 4,
            RelationFamily::Distance => 2,
        }
    }
}

/// A single relation bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Cooccur,
    OverlapYes,
    OverlapNo,
    Larger,
    Smaller,
    Equal,
    BoundaryAbove,
    BoundaryBelow,
    BoundaryLeft,
    BoundaryRight,
    CentralAbove,
    CentralBelow,
    CentralLeft,
    CentralRight,
    Near,
    Far,
}

impl Relation {
    pub fn family(self) -> RelationFamily {
        use Relation::*;
        match self {
            Cooccur => RelationFamily::Cooccurrence,
            OverlapYes | OverlapNo => RelationFamily::Overlap,
            Larger | Smaller | Equal => RelationFamily::Scale,
            BoundaryAbove | BoundaryBelow | BoundaryLeft | BoundaryRight => {
                RelationFamily::Boundary
            }
            CentralAbove | CentralBelow | CentralLeft | CentralRight => RelationFamily::Central,
            Near | Far => RelationFamily::Distance,
        }
    }
}

/// Which relation families are active and how the tunable ones behave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationConfig {
    pub cooccurrence: bool,
    pub overlap: bool,
    pub scale: bool,
    pub boundary: bool,
    pub central: bool,
    pub distance: bool,
    pub eps_scale: f64,
    pub overlap_mode: OverlapMode,
    pub overlap_threshold: f64,
    pub central_mode: CentralMode,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl RelationConfig {
    pub fn all() -> Self {
        Self {
            cooccurrence: true,
            overlap: true,
            scale: true,
            boundary: true,
            central: true,
            distance: true,
            eps_scale: 0.05,
            overlap_mode: OverlapMode::IouThreshold,
            overlap_threshold: 0.5,
            central_mode: CentralMode::Literal,
        }
    }

    /// Only the listed families active; tunables at their defaults.
    pub fn only(families: &[RelationFamily]) -> Self {
        let mut cfg = Self::all();
        for f in RelationFamily::ALL {
            cfg.set(f, families.contains(&f));
        }
        cfg
    }

    pub fn is_active(&self, family: RelationFamily) -> bool {
        match family {
            RelationFamily::Cooccurrence => self.cooccurrence,
            RelationFamily::Overlap => self.overlap,
            RelationFamily::Scale => self.scale,
            RelationFamily::Boundary => self.boundary,
            RelationFamily::Central => self.central,
            RelationFamily::Distance => self.distance,
        }
    }

    pub fn set(&mut self, family: RelationFamily, on: bool) {
        match family {
            RelationFamily::Cooccurrence => self.cooccurrence = on,
            RelationFamily::Overlap => self.overlap = on,
            RelationFamily::Scale => self.scale = on,
            RelationFamily::Boundary => self.boundary = on,
            RelationFamily::Central => self.central = on,
            RelationFamily::Distance => self.distance = on,
        }
    }

    pub fn active_families(&self) -> impl Iterator<Item = RelationFamily> + '_ {
        RelationFamily::ALL
            .into_iter()
            .filter(|f| self.is_active(*f))
    }

    /// Number of bits per class block.
    pub fn active_width(&self) -> usize {
        self.active_families().map(RelationFamily::width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.active_width() == 0 {
            return Err(Error::Config("at least one relation family must be active".into()));
        }
        if !(self.eps_scale >= 0.0 && self.eps_scale.is_finite()) {
            return Err(Error::Config(format!("eps_scale must be >= 0, got {}", self.eps_scale)));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::Config(format!(
                "overlap_threshold must lie in [0, 1], got {}",
                self.overlap_threshold
            )));
        }
        Ok(())
    }
}

/// All sixteen relation bits for an ordered (reference, other) pair.
/// Bits of inactive families are left at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationBits {
    pub cooccur: bool,
    pub overlap_yes: bool,
    pub overlap_no: bool,
    pub larger: bool,
    pub smaller: bool,
    pub equal: bool,
    pub boundary: Directions,
    pub central: Directions,
    pub near: bool,
    pub far: bool,
}

impl RelationBits {
    pub fn get(&self, relation: Relation) -> bool {
        use Relation::*;
        match relation {
            Cooccur => self.cooccur,
            OverlapYes => self.overlap_yes,
            OverlapNo => self.overlap_no,
            Larger => self.larger,
            Smaller => self.smaller,
            Equal => self.equal,
            BoundaryAbove => self.boundary.above,
            BoundaryBelow => self.boundary.below,
            BoundaryLeft => self.boundary.left,
            BoundaryRight => self.boundary.right,
            CentralAbove => self.central.above,
            CentralBelow => self.central.below,
            CentralLeft => self.central.left,
            CentralRight => self.central.right,
            Near => self.near,
            Far => self.far,
        }
    }

    /// Bits of one family in layout order.
    pub fn family_bits(&self, family: RelationFamily) -> &'static [Relation] {
        use Relation::*;
        match family {
            RelationFamily::Cooccurrence => &[Cooccur],
            RelationFamily::Overlap => &[OverlapYes, OverlapNo],
            RelationFamily::Scale => &[Larger, Smaller, Equal],
            RelationFamily::Boundary => &[BoundaryAbove, BoundaryBelow, BoundaryLeft, BoundaryRight],
            RelationFamily::Central => &[CentralAbove, CentralBelow, CentralLeft, CentralRight],
            RelationFamily::Distance => &[Near, Far],
        }
    }

    /// The active bits, in layout order, as `0.0` / `1.0`.
    pub fn active_values<'a>(&'a self, cfg: &'a RelationConfig) -> impl Iterator<Item = f64> + 'a {
        cfg.active_families()
            .flat_map(move |f| self.family_bits(f).iter())
            .map(move |r| if self.get(*r) { 1.0 } else { 0.0 })
    }
}

pub fn relation_bits(r: &BBox, o: &BBox, cfg: &RelationConfig) -> RelationBits {
    let mut bits = RelationBits::default();
    if cfg.cooccurrence {
        bits.cooccur = true;
    }
    if cfg.overlap {
        let yes = overlap_relation(r, o, cfg.overlap_mode, cfg.overlap_threshold);
        bits.overlap_yes = yes;
        bits.overlap_no = !yes;
    }
    if cfg.scale {
        match scale_relation(r, o, cfg.eps_scale) {
            Scale::Larger => bits.larger = true,
            Scale::Smaller => bits.smaller = true,
            Scale::Equal => bits.equal = true,
        }
    }
    if cfg.boundary {
        bits.boundary = boundary_relations(r, o);
    }
    if cfg.central {
        bits.central = central_relations(r, o, cfg.central_mode);
    }
    if cfg.distance {
        match distance_relation(r, o) {
            Distance::Near => bits.near = true,
            Distance::Far => bits.far = true,
        }
    }
    bits
}
