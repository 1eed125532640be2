#ifndef CUNET_IO_HPP
#define CUNET_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cunet/autodiff.hpp"
#include "cunet/data.hpp"
#include "cunet/model.hpp"

namespace cunet {

// Binary netpbm images: P5 for single-channel, P6 for 3-channel tensors.
// Samples are scaled to [0,1] by maxval on load; maxval > 255 selects 16-bit
// big-endian samples. Saving clamps to [0,1] and rounds to maxval levels.
Tensor load_image(const std::string& path);
void save_image(const Tensor& t, const std::string& path, int maxval = 255);

struct DatasetSpec {
  TaskKind kind = TaskKind::GuidedSR;
  int count = 64;
  std::uint64_t seed = 1;
  DatasetOptions options;
};

struct ExperimentConfig {
  ModelConfig model;  // model.task is the experiment task
  TrainConfig train;
  DatasetSpec data;
  std::string out_dir = "out";
};

// Canonical textual form: JSON with alphabetically ordered keys; unknown keys
// are rejected, so parse -> serialize -> parse is a fixed point.
ExperimentConfig parse_config(const std::string& json_text);
std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig load_config_file(const std::string& path);

// One --set override, key as a dotted path ("model.K", "train.lr0").
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

struct CheckpointMeta {
  int epoch = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
};

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

// Persisted parameter container.
//
// File layout: magic "CUN1", format version as u32 little-endian, a u32
// little-endian byte length followed by that many bytes of UTF-8 JSON (model
// hyperparameters, metadata, and the tensor table with per-tensor byte
// offsets), then the raw little-endian f32 payloads in table order.
struct Checkpoint {
  std::uint32_t version = 1;
  ModelConfig model;
  CheckpointMeta meta;
  std::vector<TensorEntry> tensors;
  bool has_optimizer = false;
  long adam_t = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint make_checkpoint(const CUNetParams& params, const AdamState* optimizer,
                           const CheckpointMeta& meta);
CUNetParams params_from_checkpoint(const Checkpoint& ck);
AdamState adam_from_checkpoint(const Checkpoint& ck, const CUNetParams& params);

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Dataset directory: numbered PGM/PPM triples plus manifest.json.
void write_dataset(const std::string& dir, const std::vector<SamplePair>& samples,
                   const DatasetSpec& spec);
std::vector<SamplePair> read_dataset(const std::string& dir);

}  // namespace cunet

#endif
