//! Hand-built scenarios: the outdated-map world, where the map shows a
//! doorway the real wall no longer has.

use crate::episodes::{step_budget, Episode};
use crate::geometry::Point;
use crate::kinematics::{CollisionMap, Pose};
use crate::planners::dijkstra_field;
use crate::sim::NavWorld;
use crate::training::TrainEpisode;
use crate::world::{generate_map, OccupancyGrid, WorldKind, WorldSpec};
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

pub const OUTDATED_MAP_GAP_X: f64 = 3.0;
pub const OUTDATED_TRUE_GAP_X: f64 = 7.0;

#[derive(Debug, Clone)]
pub struct OutdatedMapFixture {
    pub truth: OccupancyGrid,
    /// What the map claims: same wall, doorway in the wrong place.
    pub planning_map: OccupancyGrid,
    pub start: Pose,
    pub goal: Point,
}

fn gap_world(x: f64) -> OccupancyGrid {
    generate_map(&WorldSpec::new(WorldKind::HiddenGapCorridor, 10.0, 10.0, 0).with_gap(1.2, Some(x)))
        .expect("fixture world is valid")
}

pub fn outdated_map() -> OutdatedMapFixture {
    OutdatedMapFixture {
        truth: gap_world(OUTDATED_TRUE_GAP_X),
        planning_map: gap_world(OUTDATED_MAP_GAP_X),
        start: Pose::new(5.0, 2.0, FRAC_PI_2),
        goal: Point::new(5.0, 8.0),
    }
}

impl OutdatedMapFixture {
    /// The fixture as a runnable episode whose context map is the outdated one.
    pub fn episode(&self) -> TrainEpisode {
        let world = NavWorld::with_context_map(self.truth.clone(), self.planning_map.clone());
        let geodesic = dijkstra_field(world.collision.grid(), self.goal)
            .expect("goal is free")
            .at_point(self.start.position());
        let ep = Episode {
            id: 0,
            map_ref: None,
            start: self.start,
            goal: self.goal,
            geodesic,
            euclidean: self.start.position().distance(&self.goal),
            budget: step_budget(geodesic),
        };
        (Arc::new(world), ep)
    }

    pub fn inflated_truth(&self) -> OccupancyGrid {
        CollisionMap::for_robot(&self.truth).grid().clone()
    }

    pub fn inflated_planning_map(&self) -> OccupancyGrid {
        CollisionMap::for_robot(&self.planning_map).grid().clone()
    }
}
