//! In-memory session: facades, clusters and their shared meshes.

use std::collections::BTreeMap;
use std::path::Path;

use fenestra_core::dataset::{extract_patch, load_facade, DatasetError, FacadeRecord, DEFAULT_DILATION};
use fenestra_core::grammar::{parse_grammar, GrammarTree};
use fenestra_core::inference::{ClusterRecord, GroupedPrediction, MemberRef};
use fenestra_core::procgen::{export_mesh_obj, export_obj, instance_scene, window_mesh, InstancePlacement, Mesh, PatchImage, Transform};
use serde::Serialize;

use crate::error::ApiError;

pub struct Facade {
    pub record: FacadeRecord,
    pub image: image::RgbImage,
}

/// A cluster, its revision and the one mesh all its members share.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub record: ClusterRecord,
    pub revision: u64,
    mesh: Option<Mesh>,
}

impl Cluster {
    pub fn mesh(&self) -> Option<&Mesh> {
        self.mesh.as_ref()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterView<'a> {
    #[serde(flatten)]
    pub record: &'a ClusterRecord,
    pub revision: u64,
}

impl Cluster {
    pub fn view(&self) -> ClusterView<'_> {
        ClusterView {
            record: &self.record,
            revision: self.revision,
        }
    }
}

#[derive(Default)]
pub struct Session {
    facades: BTreeMap<String, Facade>,
    clusters: BTreeMap<String, Cluster>,
    owners: BTreeMap<MemberRef, String>,
    next_id: u64,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads annotation files and the images they reference.
    pub fn load(xml_paths: &[impl AsRef<Path>]) -> Result<Self, DatasetError> {
        let mut s = Self::new();
        for p in xml_paths {
            let record = load_facade(p.as_ref())?;
            let image = image::open(&record.image_path)
                .map_err(|e| DatasetError::Image(format!("{}: {e}", record.image_path.display())))?
                .to_rgb8();
            s.add_facade(record, image);
        }
        Ok(s)
    }

    pub fn add_facade(&mut self, record: FacadeRecord, image: image::RgbImage) {
        self.facades.insert(record.id.clone(), Facade { record, image });
    }

    pub fn facades(&self) -> impl Iterator<Item = &Facade> {
        self.facades.values()
    }

    pub fn facade(&self, id: &str) -> Result<&Facade, ApiError> {
        self.facades.get(id).ok_or_else(|| ApiError::NotFound(format!("facade {id}")))
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: &str) -> Result<&Cluster, ApiError> {
        self.clusters.get(id).ok_or_else(|| ApiError::NotFound(format!("cluster {id}")))
    }

    fn cluster_mut(&mut self, id: &str) -> Result<&mut Cluster, ApiError> {
        self.clusters.get_mut(id).ok_or_else(|| ApiError::NotFound(format!("cluster {id}")))
    }

    pub fn owner(&self, member: &MemberRef) -> Option<&str> {
        self.owners.get(member).map(String::as_str)
    }

    /// Groups boxes of one facade. Each member is placed by mapping patch
    /// coordinates of its dilated box back onto the facade image.
    pub fn create_cluster(&mut self, facade_id: &str, box_ids: &[usize]) -> Result<&Cluster, ApiError> {
        if box_ids.is_empty() {
            return Err(ApiError::unprocessable("a cluster needs at least one box", Some("box_ids")));
        }
        let facade = self.facade(facade_id)?;
        let mut members = Vec::with_capacity(box_ids.len());
        let mut placements = Vec::with_capacity(box_ids.len());
        let id = format!("c{}", self.next_id + 1);
        for (i, &box_id) in box_ids.iter().enumerate() {
            if box_ids[..i].contains(&box_id) {
                return Err(ApiError::unprocessable(format!("box {box_id} listed twice"), Some(&format!("box_ids[{i}]"))));
            }
            let b = facade
                .record
                .boxes
                .iter()
                .find(|b| b.id == box_id)
                .ok_or_else(|| ApiError::NotFound(format!("box {box_id} of facade {facade_id}")))?;
            let member = MemberRef {
                facade_id: facade_id.to_string(),
                box_id,
            };
            if let Some(owner) = self.owners.get(&member) {
                return Err(ApiError::Conflict(format!("box {box_id} already belongs to cluster {owner}")));
            }
            let (_, scale) = extract_patch(&facade.image, b, DEFAULT_DILATION).map_err(|e| ApiError::unprocessable(e.to_string(), None))?;
            placements.push(InstancePlacement {
                cluster_id: id.clone(),
                transform: Transform::patch_to_wall(scale.origin, scale.scale),
            });
            members.push(member);
        }
        self.next_id += 1;
        for m in &members {
            self.owners.insert(m.clone(), id.clone());
        }
        let record = ClusterRecord {
            id: id.clone(),
            members,
            placements,
            grammar: None,
        };
        record.check().map_err(|e| ApiError::Internal(e))?;
        Ok(self.clusters.entry(id).or_insert(Cluster {
            record,
            revision: 1,
            mesh: None,
        }))
    }

    /// Member patches in member order, cut as for training data.
    pub fn member_patches(&self, cluster_id: &str) -> Result<Vec<PatchImage>, ApiError> {
        let cluster = self.cluster(cluster_id)?;
        cluster
            .record
            .members
            .iter()
            .map(|m| {
                let facade = self.facade(&m.facade_id)?;
                let b = facade
                    .record
                    .boxes
                    .iter()
                    .find(|b| b.id == m.box_id)
                    .ok_or_else(|| ApiError::Internal(format!("box {} vanished", m.box_id)))?;
                extract_patch(&facade.image, b, DEFAULT_DILATION)
                    .map(|(p, _)| p)
                    .map_err(|e| ApiError::unprocessable(e.to_string(), None))
            })
            .collect()
    }

    fn set_grammar(&mut self, cluster_id: &str, tree: GrammarTree, if_match: Option<u64>) -> Result<u64, ApiError> {
        let cluster = self.cluster_mut(cluster_id)?;
        if let Some(expected) = if_match {
            if expected != cluster.revision {
                return Err(ApiError::PreconditionFailed {
                    expected,
                    current: cluster.revision,
                });
            }
        }
        let mesh = window_mesh(&tree).map_err(|e| ApiError::unprocessable(e.to_string(), Some("$")))?;
        cluster.record.grammar = Some(tree);
        cluster.mesh = Some(mesh);
        cluster.revision += 1;
        Ok(cluster.revision)
    }

    /// Stores an inference result as the cluster's grammar.
    pub fn apply_inference(&mut self, cluster_id: &str, grouped: &GroupedPrediction) -> Result<u64, ApiError> {
        self.set_grammar(cluster_id, grouped.grammar.clone(), None)
    }

    /// Replaces the grammar from a JSON document; the shared mesh is rebuilt
    /// once. `if_match` guards against stale revisions.
    pub fn update_grammar(&mut self, cluster_id: &str, json: &str, if_match: Option<u64>) -> Result<u64, ApiError> {
        self.cluster(cluster_id)?;
        let tree = parse_grammar(json).map_err(|e| ApiError::unprocessable(e.to_string(), e.path()))?;
        self.set_grammar(cluster_id, tree, if_match)
    }

    pub fn mesh_obj(&self, cluster_id: &str) -> Result<String, ApiError> {
        let cluster = self.cluster(cluster_id)?;
        let mesh = cluster
            .mesh
            .as_ref()
            .ok_or_else(|| ApiError::Conflict(format!("cluster {cluster_id} has no grammar yet")))?;
        Ok(export_mesh_obj(mesh, cluster_id))
    }

    /// Every cluster with a grammar on this facade, instanced at its members.
    pub fn scene_obj(&self, facade_id: &str) -> Result<String, ApiError> {
        self.facade(facade_id)?;
        let mut meshes = BTreeMap::new();
        let mut placements = Vec::new();
        for c in self.clusters.values() {
            let Some(mesh) = &c.mesh else { continue };
            let mut any = false;
            for (m, p) in c.record.members.iter().zip(&c.record.placements) {
                if m.facade_id == facade_id {
                    placements.push(p.clone());
                    any = true;
                }
            }
            if any {
                meshes.insert(c.record.id.clone(), mesh.clone());
            }
        }
        let scene = instance_scene(meshes, placements).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(export_obj(&scene))
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            facades: self.facades.values().map(|f| &f.record).collect(),
            clusters: self.clusters.values().map(Cluster::view).collect(),
        }
    }
}

/// What a session save writes.
#[derive(Serialize)]
pub struct Snapshot<'a> {
    pub facades: Vec<&'a FacadeRecord>,
    pub clusters: Vec<ClusterView<'a>>,
}
