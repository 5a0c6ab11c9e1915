#![no_main]

use fblab_core::io::{decode_raster, encode_raster, FieldHeader};
use fblab_core::Grid;
use libfuzzer_sys::fuzz_target;

// The first two bytes pick the grid shape, the rest is the raw raster.
fuzz_target!(|data: &[u8]| {
    let [a, b, raster @ ..] = data else { return };
    let dims = vec![2 + usize::from(a % 16), 2 + usize::from(b % 16)];
    let grid = Grid::new(vec![0.0, 0.0], 0.5, dims).expect("shape is valid");
    let header = FieldHeader::for_grid(&grid);
    if let Ok(field) = decode_raster(&header, raster) {
        assert_eq!(encode_raster(field.values()), raster);
    }
});
