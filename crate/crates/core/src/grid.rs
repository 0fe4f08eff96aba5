use crate::geometry::{Vec3, VoxelGridSpec};

const ABSENT: u32 = u32::MAX;

/// Sparse subset of a level's voxel grid.
///
/// Voxels are stored in ascending linear-index order, which fixes the order
/// of every per-voxel array derived from the grid.
#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    spec: VoxelGridSpec,
    voxels: Vec<[usize; 3]>,
    lookup: Vec<u32>,
}

impl SparseVoxelGrid {
    pub fn full(spec: VoxelGridSpec) -> Self {
        let [nx, ny, nz] = spec.dims;
        let mut voxels = Vec::with_capacity(spec.num_voxels());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push([x, y, z]);
                }
            }
        }
        let lookup = (0..voxels.len() as u32).collect();
        SparseVoxelGrid { spec, voxels, lookup }
    }

    /// Builds a grid from local indices; duplicates and out-of-range indices are dropped.
    pub fn from_indices(spec: VoxelGridSpec, indices: impl IntoIterator<Item = [usize; 3]>) -> Self {
        let mut present = vec![false; spec.num_voxels()];
        for idx in indices {
            if (0..3).all(|a| idx[a] < spec.dims[a]) {
                present[spec.linear_index(idx)] = true;
            }
        }
        Self::from_mask(spec, &present)
    }

    /// Builds a grid from a dense presence mask in linear-index order.
    pub fn from_mask(spec: VoxelGridSpec, present: &[bool]) -> Self {
        assert_eq!(present.len(), spec.num_voxels(), "mask does not match grid");
        let [nx, ny, _] = spec.dims;
        let mut voxels = Vec::new();
        let mut lookup = vec![ABSENT; present.len()];
        for (lin, _) in present.iter().enumerate().filter(|(_, p)| **p) {
            lookup[lin] = voxels.len() as u32;
            voxels.push([lin % nx, (lin / nx) % ny, lin / (nx * ny)]);
        }
        SparseVoxelGrid { spec, voxels, lookup }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[[usize; 3]] {
        &self.voxels
    }

    #[inline]
    pub fn index_of(&self, idx: [usize; 3]) -> Option<usize> {
        match self.lookup[self.spec.linear_index(idx)] {
            ABSENT => None,
            i => Some(i as usize),
        }
    }

    #[inline]
    pub fn center(&self, i: usize) -> Vec3 {
        self.spec.center(self.voxels[i])
    }

    pub fn lattice(&self, i: usize) -> [i32; 3] {
        self.spec.to_lattice(self.voxels[i])
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.voxels.iter().map(|&v| self.spec.center(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec {
            origin: [-0.32, 0.0, 0.16],
            voxel_size: 0.16,
            dims: [3, 2, 2],
            level: 1,
        }
    }

    #[test]
    fn full_and_sparse_lookup() {
        let full = SparseVoxelGrid::full(spec());
        assert_eq!(full.len(), 12);
        for (i, &v) in full.voxels().iter().enumerate() {
            assert_eq!(full.index_of(v), Some(i));
        }
        let sparse = SparseVoxelGrid::from_indices(spec(), [[2, 1, 1], [0, 0, 0], [2, 1, 1], [9, 0, 0]]);
        assert_eq!(sparse.voxels(), &[[0, 0, 0], [2, 1, 1]]);
        assert_eq!(sparse.index_of([1, 0, 0]), None);
        assert_eq!(sparse.lattice(0), [-2, 0, 1]);
    }
}
