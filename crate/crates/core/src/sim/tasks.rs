//! Task analogs, case layouts, geometric success predicates and the task
//! library document.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{dist, Receptacle, SimError, WorldState, MAX_OBJECT_SIZE, MIN_OBJECT_SIZE};
use crate::expert::ProficiencyProfile;

pub const TASK_SCHEMA_VERSION: &str = "imlw-tasks-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub position: [f64; 2],
    pub size: f64,
    pub color_index: u8,
    pub shape_index: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptaclePlacement {
    pub position: [f64; 2],
    pub radius: f64,
    pub color_index: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSetup {
    pub case_id: String,
    pub objects: Vec<ObjectPlacement>,
    pub receptacles: Vec<ReceptaclePlacement>,
    pub rng_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Objects the arm has to move (Table-I style "Object Num"); scenes may
    /// hold extra distractor candidates.
    pub object_count: usize,
    pub receptacle_count: usize,
    pub cases: Vec<CaseSetup>,
    pub uses_color: bool,
    pub uses_size: bool,
    pub uses_shape: bool,
    pub logic_steps: u32,
    pub success_rule: String,
    /// Color sequence for order-sensitive rules (pick order, stack order).
    #[serde(default)]
    pub color_order: Vec<u8>,
    pub max_rollout_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessRule {
    /// The single target object rests in the single receptacle.
    PlaceTarget,
    /// Objects listed in `color_order` rest in the receptacle of their color.
    ColorMatch,
    /// Receptacle 0 holds exactly the `color_order` objects, bottom to top.
    StackOrder,
    /// k-th smallest object rests in the k-th smallest receptacle.
    SizeMatch,
    PlaceSmallest,
    PlaceLargest,
}

impl std::str::FromStr for SuccessRule {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "place_target" => Self::PlaceTarget,
            "color_match" => Self::ColorMatch,
            "stack_order" => Self::StackOrder,
            "size_match" => Self::SizeMatch,
            "place_smallest" => Self::PlaceSmallest,
            "place_largest" => Self::PlaceLargest,
            other => return Err(SimError::Config(format!("unknown success rule {other:?}"))),
        })
    }
}

impl TaskSpec {
    pub fn rule(&self) -> Result<SuccessRule, SimError> {
        self.success_rule.parse()
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseSetup> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(format!("task {}: {msg}", self.name)));
        self.rule()?;
        if self.cases.is_empty() {
            return fail("no cases".into());
        }
        if self.logic_steps < 1 {
            return fail("logic_steps must be >= 1".into());
        }
        if !(self.max_rollout_time > 0.0) {
            return fail("max_rollout_time must be positive".into());
        }
        for (i, case) in self.cases.iter().enumerate() {
            if self.cases[..i].iter().any(|c| c.case_id == case.case_id) {
                return fail(format!("duplicate case id {}", case.case_id));
            }
            if case.objects.len() < self.object_count || case.objects.len() > crate::data::MAX_OBJECT_SLOTS {
                return fail(format!("case {} has {} objects", case.case_id, case.objects.len()));
            }
            if case.receptacles.len() != self.receptacle_count || case.receptacles.len() > crate::data::MAX_RECEPTACLE_SLOTS {
                return fail(format!("case {} has {} receptacles", case.case_id, case.receptacles.len()));
            }
            if !(case.rng_jitter >= 0.0) {
                return fail(format!("case {} has negative jitter", case.case_id));
            }
            for o in &case.objects {
                if !(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE).contains(&o.size) {
                    return fail(format!("case {} object size {} out of range", case.case_id, o.size));
                }
                if o.position.iter().any(|&c| c - o.size / 2.0 < 0.0 || c + o.size / 2.0 > 1.0) {
                    return fail(format!("case {} object outside workspace", case.case_id));
                }
                if o.shape_index > 2 || o.color_index as usize >= super::PALETTE.len() {
                    return fail(format!("case {} object has invalid shape/color", case.case_id));
                }
            }
            for (a, oa) in case.objects.iter().enumerate() {
                for ob in &case.objects[a + 1..] {
                    if dist(oa.position, ob.position) < (oa.size + ob.size) / 2.0 {
                        return fail(format!("case {} objects overlap", case.case_id));
                    }
                }
            }
            for r in &case.receptacles {
                if r.radius <= MAX_OBJECT_SIZE / 2.0 {
                    return fail(format!("case {} receptacle radius {} too small", case.case_id, r.radius));
                }
                if r.position.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return fail(format!("case {} receptacle outside workspace", case.case_id));
                }
            }
        }
        Ok(())
    }
}

/// Ordered (object id, receptacle id) pairs the task requires, in the order a
/// demonstrator should execute them.
pub fn assignments(task: &TaskSpec, world: &WorldState) -> Result<Vec<(u32, u32)>, SimError> {
    let missing = || SimError::Config(format!("task {}: scene does not support rule {}", task.name, task.success_rule));
    let first_recep = world.receptacles.first().ok_or_else(missing)?.id;
    Ok(match task.rule()? {
        SuccessRule::PlaceTarget => vec![(world.objects.first().ok_or_else(missing)?.id, first_recep)],
        SuccessRule::ColorMatch => task
            .color_order
            .iter()
            .map(|&c| {
                let o = world.objects.iter().find(|o| o.color_index == c).ok_or_else(missing)?;
                let r = world.receptacles.iter().find(|r| r.color_index == c).ok_or_else(missing)?;
                Ok((o.id, r.id))
            })
            .collect::<Result<_, SimError>>()?,
        SuccessRule::StackOrder => task
            .color_order
            .iter()
            .map(|&c| Ok((world.objects.iter().find(|o| o.color_index == c).ok_or_else(missing)?.id, first_recep)))
            .collect::<Result<_, SimError>>()?,
        SuccessRule::SizeMatch => {
            let mut objs: Vec<_> = world.objects.iter().collect();
            objs.sort_by(|a, b| a.size.total_cmp(&b.size).then(a.id.cmp(&b.id)));
            let mut receps: Vec<&Receptacle> = world.receptacles.iter().collect();
            receps.sort_by(|a, b| a.radius.total_cmp(&b.radius).then(a.id.cmp(&b.id)));
            if objs.len() != receps.len() {
                return Err(missing());
            }
            let mut pairs: Vec<(u32, u32)> = objs.iter().zip(&receps).map(|(o, r)| (o.id, r.id)).collect();
            pairs.sort_by_key(|&(o, _)| o);
            pairs
        }
        SuccessRule::PlaceSmallest | SuccessRule::PlaceLargest => {
            let largest = task.rule()? == SuccessRule::PlaceLargest;
            let o = world
                .objects
                .iter()
                .reduce(|best, o| {
                    let better = if largest { o.size > best.size } else { o.size < best.size };
                    if better {
                        o
                    } else {
                        best
                    }
                })
                .ok_or_else(missing)?;
            vec![(o.id, first_recep)]
        }
    })
}

/// Geometric success predicate; a pure function of the world.
pub fn success(task: &TaskSpec, world: &WorldState) -> Result<bool, SimError> {
    let rule = task.rule()?;
    let pairs = assignments(task, world)?;
    let placed = pairs.iter().all(|&(o, r)| {
        let (Some(obj), Some(rec)) = (world.object(o), world.receptacles.iter().find(|x| x.id == r)) else {
            return false;
        };
        !world.is_attached(o) && rec.contains(obj.position)
    });
    if !placed {
        return Ok(false);
    }
    if rule == SuccessRule::StackOrder {
        let expected: Vec<u32> = pairs.iter().map(|&(o, _)| o).collect();
        return Ok(world.receptacles[0].stack == expected);
    }
    Ok(true)
}

/// Task definitions plus optional demonstrator profiles, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLibrary {
    pub schema_version: String,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub profiles: Vec<ProficiencyProfile>,
}

impl TaskLibrary {
    pub fn builtin() -> Self {
        Self {
            schema_version: TASK_SCHEMA_VERSION.into(),
            tasks: builtin_tasks(),
            profiles: ProficiencyProfile::builtin(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let lib: Self = serde_json::from_str(text).map_err(|e| SimError::Config(format!("task library: {e}")))?;
        if lib.schema_version != TASK_SCHEMA_VERSION {
            return Err(SimError::Config(format!(
                "task library schema {:?}, expected {TASK_SCHEMA_VERSION:?}",
                lib.schema_version
            )));
        }
        for t in &lib.tasks {
            t.validate()?;
        }
        for p in &lib.profiles {
            p.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task library serializes")
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn profile(&self, name: &str) -> Option<&ProficiencyProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }
}

const RED: u8 = 0;
const GREEN: u8 = 1;
const BLUE: u8 = 2;
const YELLOW: u8 = 3;
const PURPLE: u8 = 4;
const WHITE: u8 = 6;
const GRAY: u8 = 7;
const SQUARE: u8 = 0;
const DISC: u8 = 1;

fn obj(position: [f64; 2], size: f64, color_index: u8, shape_index: u8) -> ObjectPlacement {
    ObjectPlacement { position, size, color_index, shape_index }
}

fn recep(position: [f64; 2], radius: f64, color_index: u8) -> ReceptaclePlacement {
    ReceptaclePlacement { position, radius, color_index }
}

fn case(id: usize, objects: Vec<ObjectPlacement>, receptacles: Vec<ReceptaclePlacement>, rng_jitter: f64) -> CaseSetup {
    CaseSetup { case_id: format!("c{id}"), objects, receptacles, rng_jitter }
}

fn permutations3() -> [[usize; 3]; 6] {
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
}

#[allow(clippy::too_many_arguments)]
fn task(
    name: &str,
    object_count: usize,
    receptacle_count: usize,
    cases: Vec<CaseSetup>,
    (uses_color, uses_size, uses_shape): (bool, bool, bool),
    logic_steps: u32,
    success_rule: &str,
    color_order: Vec<u8>,
    max_rollout_time: f64,
) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        object_count,
        receptacle_count,
        cases,
        uses_color,
        uses_size,
        uses_shape,
        logic_steps,
        success_rule: success_rule.into(),
        color_order,
        max_rollout_time,
    }
}

const PAIR_LAYOUTS: [([f64; 2], [f64; 2]); 5] = [
    ([0.30, 0.40], [0.70, 0.40]),
    ([0.35, 0.50], [0.65, 0.50]),
    ([0.25, 0.35], [0.50, 0.45]),
    ([0.50, 0.35], [0.75, 0.45]),
    ([0.40, 0.30], [0.60, 0.55]),
];

fn size_candidates(sizes: &[f64], order: &[usize], slots: &[[f64; 2]], color: u8) -> Vec<ObjectPlacement> {
    order.iter().zip(slots).map(|(&k, &p)| obj(p, sizes[k], color, SQUARE)).collect()
}

/// Desk-scale analogs of the tabletop task suite.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    let pick_place_layouts: [([f64; 2], [f64; 2]); 10] = [
        ([0.30, 0.40], [0.75, 0.80]),
        ([0.70, 0.40], [0.25, 0.80]),
        ([0.50, 0.45], [0.50, 0.85]),
        ([0.25, 0.55], [0.80, 0.60]),
        ([0.75, 0.55], [0.20, 0.60]),
        ([0.40, 0.30], [0.65, 0.75]),
        ([0.60, 0.30], [0.35, 0.75]),
        ([0.50, 0.60], [0.85, 0.85]),
        ([0.20, 0.35], [0.55, 0.70]),
        ([0.80, 0.35], [0.45, 0.70]),
    ];
    let pick_place = pick_place_layouts
        .iter()
        .enumerate()
        .map(|(i, &(o, r))| case(i, vec![obj(o, 0.05, YELLOW, DISC)], vec![recep(r, 0.08, GRAY)], 0.02))
        .collect();

    let basketball = [([0.35, 0.45], [0.70, 0.85]), ([0.65, 0.45], [0.30, 0.85])]
        .iter()
        .enumerate()
        .map(|(i, &(o, r))| case(i, vec![obj(o, 0.04, GREEN, DISC)], vec![recep(r, 0.08, YELLOW)], 0.02))
        .collect();

    let plate_layouts: [([f64; 2], [f64; 2]); 5] = [
        ([0.25, 0.80], [0.75, 0.80]),
        ([0.20, 0.75], [0.80, 0.75]),
        ([0.30, 0.85], [0.70, 0.85]),
        ([0.25, 0.75], [0.60, 0.85]),
        ([0.15, 0.80], [0.85, 0.80]),
    ];
    let block_pick = (0..10)
        .map(|i| {
            let ((a, b), (p, q)) = (PAIR_LAYOUTS[i / 2], plate_layouts[i / 2]);
            let (red, green, red_plate, green_plate) = if i % 2 == 0 { (a, b, p, q) } else { (b, a, q, p) };
            case(
                i,
                vec![obj(red, 0.05, RED, SQUARE), obj(green, 0.05, GREEN, SQUARE)],
                vec![recep(red_plate, 0.08, RED), recep(green_plate, 0.08, GREEN)],
                0.015,
            )
        })
        .collect();

    let cup_bases: [[f64; 2]; 5] = [[0.50, 0.80], [0.30, 0.80], [0.70, 0.80], [0.50, 0.85], [0.40, 0.78]];
    let cup_stack = (0..10)
        .map(|i| {
            let (a, b) = PAIR_LAYOUTS[i / 2];
            let (purple, white) = if i % 2 == 0 { (a, b) } else { (b, a) };
            case(
                i,
                vec![obj(purple, 0.05, PURPLE, DISC), obj(white, 0.05, WHITE, DISC)],
                vec![recep(cup_bases[i / 2], 0.09, BLUE)],
                0.015,
            )
        })
        .collect();

    let row3 = [[0.25, 0.40], [0.50, 0.40], [0.75, 0.40]];
    let sizes3 = [0.03, 0.045, 0.06];
    let which_cube = (0..10)
        .map(|i| {
            let perm = permutations3()[i % 6];
            let radii = if i < 6 { [0.08, 0.09, 0.10] } else { [0.10, 0.09, 0.08] };
            let spots = [[0.20, 0.80], [0.50, 0.80], [0.80, 0.80]];
            case(
                i,
                size_candidates(&sizes3, &perm, &row3, PURPLE),
                spots.iter().zip(radii).map(|(&p, r)| recep(p, r, GRAY)).collect(),
                0.015,
            )
        })
        .collect();

    let extremal = |seed_shift: usize| -> Vec<CaseSetup> {
        (0..6)
            .map(|i| {
                let perm = permutations3()[(i + seed_shift) % 6];
                case(i, size_candidates(&sizes3, &perm, &row3, BLUE), vec![recep([0.5, 0.8], 0.09, GRAY)], 0.015)
            })
            .collect()
    };

    let row4 = [[0.20, 0.40], [0.40, 0.40], [0.60, 0.40], [0.80, 0.40]];
    let sizes4 = [0.03, 0.04, 0.05, 0.06];
    let pick_big_v2 = (0..12)
        .map(|i| {
            // Largest candidate at slot i % 4, remaining sizes rotated by i / 4.
            let big_slot = i % 4;
            let rot = i / 4;
            let mut order = [0usize; 4];
            let others: Vec<usize> = (0..4).filter(|&s| s != big_slot).collect();
            for (k, &slot) in others.iter().enumerate() {
                order[slot] = (k + rot) % 3;
            }
            order[big_slot] = 3;
            case(i, size_candidates(&sizes4, &order, &row4, BLUE), vec![recep([0.5, 0.8], 0.09, GRAY)], 0.01)
        })
        .collect();

    vec![
        task("PickPlace", 1, 1, pick_place, (false, false, false), 1, "place_target", vec![], 12.0),
        task("BlockPick", 2, 2, block_pick, (true, false, false), 2, "color_match", vec![RED, GREEN], 24.0),
        task("Basketball", 1, 1, basketball, (false, false, false), 1, "place_target", vec![], 12.0),
        task("CupStack", 2, 1, cup_stack, (true, false, false), 2, "stack_order", vec![PURPLE, WHITE], 24.0),
        task("WhichCube", 3, 3, which_cube, (false, true, false), 3, "size_match", vec![], 36.0),
        task("PickSmall", 1, 1, extremal(0), (false, true, false), 2, "place_smallest", vec![], 14.0),
        task("PickBig", 1, 1, extremal(3), (false, true, false), 2, "place_largest", vec![], 14.0),
        task("PickBigV2", 1, 1, pick_big_v2, (false, true, false), 2, "place_largest", vec![], 14.0),
    ]
}
