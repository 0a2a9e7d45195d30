//! Desk-scale synthetic scenario: an indoor world with low removed objects,
//! a downward-tilted 32-beam sensor and the matching training-set recipe.

use rayon::prelude::*;

use crate::augment::{extract_objects, AugmentParams, AugmentedPair, Augmenter, ObjectDatabase};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::mapping::Session;
use crate::rng;
use crate::synthscene::{generate_sessions, generate_world, SensorSpec, SyntheticSessions, World, WorldParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub world: WorldParams,
    pub channels: usize,
    /// Vertical field of view, rad.
    pub v_fov: (f64, f64),
    /// Horizontal resolution, rad.
    pub h_res: f64,
    pub noise_sigma: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            world: WorldParams {
                partitions: 4,
                furniture: 14,
                furniture_height: (0.1, 1.2),
                removed_panels: 0,
                removed_boxes: 8,
                removed_height: (0.05, 0.1),
                sensor_height: 1.8,
                ..WorldParams::default()
            },
            channels: 32,
            v_fov: (-30f64.to_radians(), 10f64.to_radians()),
            h_res: 0.5f64.to_radians(),
            noise_sigma: 0.01,
        }
    }
}

/// Training-set recipe for [`Scenario::training_pairs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRecipe {
    pub pairs: usize,
    pub pc_objects: usize,
    pub nc_objects: usize,
    /// Objects with fewer accumulated points are not reused.
    pub min_object_points: usize,
    /// Inserted objects are thinned to this voxel, matching the map density.
    pub map_voxel: f64,
}

impl Default for PairRecipe {
    fn default() -> Self {
        Self { pairs: 50, pc_objects: 2, nc_objects: 2, min_object_points: 30, map_voxel: 0.1 }
    }
}

impl Scenario {
    pub fn sensor(&self, trajectory: Vec<Pose>) -> SensorSpec {
        SensorSpec { channels: self.channels, v_fov: self.v_fov, h_res: self.h_res, noise_sigma: self.noise_sigma, ..Default::default() }
            .with_trajectory(trajectory)
    }

    pub fn world(&self, world_seed: u64) -> Result<(World, Vec<Pose>)> {
        generate_world(world_seed, &self.world)
    }

    /// Prior and current sessions of the world drawn from `world_seed`.
    pub fn sessions(&self, world_seed: u64) -> Result<SyntheticSessions> {
        let (w, traj) = self.world(world_seed)?;
        generate_sessions(&w, &self.sensor(traj), rng::derive_seed(world_seed, 7))
    }

    /// Augmented pairs built from the prior session of one world only.
    pub fn training_pairs(&self, world_seed: u64, recipe: &PairRecipe) -> Result<Vec<AugmentedPair>> {
        let s = self.sessions(world_seed)?;
        let db = object_database(&s.prior, recipe.min_object_points)?;
        let params = AugmentParams { map_voxel: Some(recipe.map_voxel), ..Default::default() };
        let aug = Augmenter::new(&s.prior, &db, params)?;
        (0..recipe.pairs)
            .into_par_iter()
            .map(|k| aug.generate(recipe.pc_objects, recipe.nc_objects, rng::derive_seed(world_seed, 1000 + k as u64)))
            .collect()
    }
}

/// Objects of a labelled session, keeping those with at least `min_points`.
pub fn object_database(session: &Session, min_points: usize) -> Result<ObjectDatabase> {
    let masks = session
        .frames()
        .iter()
        .map(|f| f.instances.clone().ok_or_else(|| Error::InvalidInput("session frames carry no instance ids".into())))
        .collect::<Result<Vec<_>>>()?;
    let mut db = extract_objects(session, &masks)?;
    db.retain_min_points(min_points);
    Ok(db)
}
