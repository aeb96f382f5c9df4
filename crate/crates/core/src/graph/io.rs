//! JSON graph files: `{"L", "D", "positions", "edges": [{"u", "v", "delay"}]}`.

use super::{Edge, Graph, GraphError};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// On-disk representation of a [`Graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(rename = "L")]
    pub nodes: usize,
    #[serde(rename = "D")]
    pub degree: usize,
    pub positions: Vec<[f64; 2]>,
    pub edges: Vec<Edge>,
}

impl From<&Graph> for GraphFile {
    fn from(g: &Graph) -> Self {
        GraphFile {
            nodes: g.node_count(),
            degree: g.degree(),
            positions: g.positions().to_vec(),
            edges: g.edges().to_vec(),
        }
    }
}

impl TryFrom<GraphFile> for Graph {
    type Error = GraphError;

    fn try_from(f: GraphFile) -> Result<Self, GraphError> {
        if f.positions.len() != f.nodes {
            return Err(GraphError::Invalid(format!(
                "L = {} but {} positions given",
                f.nodes,
                f.positions.len()
            )));
        }
        Graph::from_parts(f.degree, f.positions, f.edges)
    }
}

pub fn save_graph(g: &Graph) -> String {
    serde_json::to_string(&GraphFile::from(g)).expect("graph serialization cannot fail")
}

pub fn load_graph(text: &str) -> Result<Graph, GraphError> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Graph::try_from(file)
}

impl Graph {
    pub fn write_to(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, save_graph(self))?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Graph, GraphError> {
        load_graph(&std::fs::read_to_string(path)?)
    }
}
