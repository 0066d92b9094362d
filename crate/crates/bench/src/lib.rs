//! Fixtures shared by the criterion benches.

use mscada_core::train::TrainConfig;
use mscada_core::synthdata::GenConfig;

/// A small equality2 run sized for per-iteration timing.
pub fn bench_config() -> TrainConfig {
    TrainConfig {
        scenario: Some("equality2".into()),
        samples: GenConfig {
            height: 32,
            width: 32,
            source_samples: 16,
            target_train_samples: 8,
            target_test_samples: 4,
        },
        batch_size: 2,
        backbone_channels: 12,
        backbone_depth: 3,
        expert_channels: 12,
        spatial_channels: 12,
        head_pool: 2,
        ..TrainConfig::default()
    }
}
