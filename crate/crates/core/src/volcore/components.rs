use super::volume::{CropBox, Geometry, Mask3D};

/// A 26-connected foreground region, voxels as sorted linear indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub voxels: Vec<usize>,
    pub bbox: CropBox,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    /// Lowest linear index in the component.
    pub fn first(&self) -> usize {
        self.voxels[0]
    }
}

fn neighbours(geom: &Geometry, i: usize, out: &mut Vec<usize>) {
    let [x, y, z] = geom.coords(i);
    let [nx, ny, nz] = geom.dims;
    out.clear();
    for dz in -1i64..=1 {
        let zz = z as i64 + dz;
        if zz < 0 || zz >= nz as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= ny as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let xx = x as i64 + dx;
                if xx < 0 || xx >= nx as i64 || (dx == 0 && dy == 0 && dz == 0) {
                    continue;
                }
                out.push(geom.index(xx as usize, yy as usize, zz as usize));
            }
        }
    }
}

/// 26-connected components of the foreground, ordered by descending size with
/// ties broken by the lowest linear index.
pub fn connected_components(mask: &Mask3D) -> Vec<Component> {
    let geom = *mask.geometry();
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut stack = Vec::new();
    let mut nb = Vec::with_capacity(26);
    let mut comps = Vec::new();
    for start in 0..data.len() {
        if data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        let mut lower = geom.dims;
        let mut upper = [0; 3];
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let c = geom.coords(i);
            for a in 0..3 {
                lower[a] = lower[a].min(c[a]);
                upper[a] = upper[a].max(c[a] + 1);
            }
            neighbours(&geom, i, &mut nb);
            for &j in &nb {
                if data[j] == 1 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        voxels.sort_unstable();
        comps.push(Component {
            voxels,
            bbox: CropBox { lower, upper },
        });
    }
    comps.sort_by(|a, b| b.size().cmp(&a.size()).then(a.first().cmp(&b.first())));
    comps
}

/// Mask volume in millilitres for `voxel_count` voxels of the given spacing (mm).
pub fn component_volume_ml(voxel_count: usize, spacing: [f64; 3]) -> f64 {
    voxel_count as f64 * spacing.iter().product::<f64>() / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Mask3D {
        let g = Geometry::unit(dims).unwrap();
        Mask3D::from_fn(g, |x, y, z| on.contains(&[x, y, z])).unwrap()
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn two_cubes_and_single_voxel() {
        let g = Geometry::unit([10, 10, 10]).unwrap();
        let m = Mask3D::from_fn(g, |x, y, z| (x < 3 && y < 3 && z < 3) || (x >= 6 && y >= 6 && z >= 6 && x < 8 && y < 8 && z < 8)).unwrap();
        let cs = connected_components(&m);
        assert_eq!(cs.iter().map(Component::size).collect::<Vec<_>>(), vec![27, 8]);
        assert_eq!(cs[1].bbox, CropBox { lower: [6; 3], upper: [8; 3] });

        let single = mask([4, 4, 4], &[[2, 1, 3]]);
        let cs = connected_components(&single);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].size(), 1);
        assert!(connected_components(&mask([2, 2, 2], &[])).is_empty());
    }

    #[test]
    fn ties_are_ordered_by_lowest_index() {
        let m = mask([5, 1, 1], &[[4, 0, 0], [0, 0, 0], [2, 0, 0]]);
        let firsts: Vec<usize> = connected_components(&m).iter().map(Component::first).collect();
        assert_eq!(firsts, vec![0, 2, 4]);
    }

    #[test]
    fn volume_in_millilitres() {
        assert!((component_volume_ml(1000, [1.0; 3]) - 1.0).abs() < 1e-12);
        assert!((component_volume_ml(1, [1.0; 3]) - 0.001).abs() < 1e-15);
    }
}
