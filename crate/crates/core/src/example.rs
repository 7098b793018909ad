//! Bundled multiplier-accelerator economy example: three modes (norm, boom,
//! slump), two states, one input, and a four-vertex polytope of transition
//! matrices. Published reference values are kept alongside for comparison
//! runs and tests.

use crate::model::Problem;

/// Problem file text of the bundled example.
pub const SAMUELSON_JSON: &str = include_str!("../data/samuelson.json");

/// The four-vertex example problem, with terminal weights `(2I, I, 4I)` and
/// initial condition `x0 = [1, 1]`, `θ0 = 1`.
pub fn samuelson() -> Problem {
    Problem::from_json_str(SAMUELSON_JSON).expect("bundled fixture parses")
}

/// The same example restricted to the first three vertices.
pub fn samuelson_three_vertex() -> Problem {
    samuelson()
        .with_vertices(&[0, 1, 2])
        .expect("vertex subset of the fixture")
}

/// Published values, rounded to three decimals. Vertex numbers are 1-based.
pub mod reference {
    /// Spectral radii of the open-loop second-moment matrices, per vertex.
    pub const OPEN_LOOP_RADII: [f64; 4] = [31.652, 20.110, 29.962, 38.910];

    /// Per-mode gain rows `[K_1, K_2, K_3]`, each `[k_a, k_b]`.
    pub type GainTable = [[f64; 2]; 3];

    /// Stabilizing gains for the four-vertex polytope, from vertices 3 and 4.
    pub const FOUR_VERTEX_GAINS: [GainTable; 2] = [
        [[-2.223, 2.400], [-38.860, 2.345], [4.632, -4.890]],
        [[-1.921, 1.538], [-38.889, 2.392], [4.511, -5.407]],
    ];
    pub const FOUR_VERTEX_SOURCES: [usize; 2] = [3, 4];
    /// Printed strict upper bounds on the closed-loop joint spectral radii.
    pub const FOUR_VERTEX_JSR: [f64; 2] = [0.05077, 0.66739];
    /// Infinite-horizon cost per branch for `x0 = [1, 1]` and `θ0 = 1, 2, 3`.
    pub const FOUR_VERTEX_COSTS: [[f64; 2]; 3] =
        [[495.715, 6.161], [2519.877, 3478.062], [591.376, 3.062]];
    /// Branch (0-based, in source-vertex order) selected for `θ0 = 1, 2, 3`.
    pub const FOUR_VERTEX_SELECTION: [usize; 3] = [0, 1, 0];

    /// Step-0 gains of the horizon-8 solve with terminal weights `(2I, I, 4I)`.
    pub const FOUR_VERTEX_T8_GAINS: [GainTable; 2] = [
        [[-2.223, 2.399], [-38.860, 2.344], [4.632, -4.891]],
        [[-1.921, 1.538], [-38.889, 2.392], [4.512, -5.403]],
    ];
    /// Horizon-8 costs per branch for `x0 = [1, 1]` and `θ0 = 1, 2, 3`.
    pub const FOUR_VERTEX_T8_COSTS: [[f64; 2]; 3] =
        [[495.698, 6.160], [2519.876, 3478.062], [591.344, 3.212]];
    /// Peak parsimonious-set size and its offset from the horizon end.
    pub const FOUR_VERTEX_PEAK: (usize, usize) = (16, 4);

    /// Stabilizing gains for the three-vertex polytope, from vertices 1 and 3.
    pub const THREE_VERTEX_GAINS: [GainTable; 2] = [
        [[-2.222, 2.393], [-38.860, 2.331], [4.629, -4.880]],
        [[-2.223, 2.400], [-38.860, 2.345], [4.632, -4.890]],
    ];
    pub const THREE_VERTEX_SOURCES: [usize; 2] = [1, 3];
    pub const THREE_VERTEX_JSR: [f64; 2] = [0.03569, 0.03610];
    pub const THREE_VERTEX_COSTS: [[f64; 2]; 3] =
        [[495.036, 495.715], [2613.443, 2519.877], [366.066, 591.376]];
    /// Horizon-5 costs per branch.
    pub const THREE_VERTEX_T5_COSTS: [[f64; 2]; 3] =
        [[495.021, 495.715], [2613.416, 2519.853], [366.051, 591.358]];
    pub const THREE_VERTEX_PEAK: (usize, usize) = (6, 2);
}
