#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vitpose/codec.hpp"
#include "vitpose/rng.hpp"
#include "vitpose/tensor.hpp"

namespace vitpose {

struct DatasetSpec {
  std::string name = "coco";
  std::size_t task_id = 0;
  std::size_t num_keypoints = 17;
  std::vector<std::string> keypoint_names;
  std::vector<std::array<std::size_t, 2>> skeleton;  // 0-based joint pairs
  std::vector<std::array<std::size_t, 2>> flip_pairs;  // left/right joints swapped by a mirror
  std::vector<double> sigmas;
  std::string annotations;
  std::string image_root;
};

/// Throws std::invalid_argument when sigma or name counts disagree with num_keypoints,
/// or a skeleton/flip index is out of range.
void validate(const DatasetSpec& spec);
/// Also rejects repeated task ids.
void validate(const std::vector<DatasetSpec>& specs);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
DatasetSpec load_dataset_spec(const std::string& path);

/// The 17-joint COCO person layout.
DatasetSpec coco_person_spec();

struct Box {
  double x = 0, y = 0, w = 0, h = 0;
};

struct ImageInfo {
  std::int64_t id = 0;
  std::string file_name;
  std::size_t width = 0, height = 0;
};

struct PoseInstance {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  Box bbox;
  double area = 0.0;
  bool crowd = false;
  Pose keypoints;
  std::size_t task = 0;
};

struct CocoDataset {
  std::vector<ImageInfo> images;
  std::vector<PoseInstance> instances;
  std::vector<std::string> keypoint_names;
  std::vector<std::array<std::size_t, 2>> skeleton;  // 0-based

  const ImageInfo& image(std::int64_t id) const;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t byte) : std::runtime_error(what), byte_(byte) {}
  std::size_t byte() const { return byte_; }

 private:
  std::size_t byte_;
};

class SpecMismatchError : public std::runtime_error {
 public:
  SpecMismatchError(const std::string& what, std::int64_t annotation_id)
      : std::runtime_error(what), annotation_id_(annotation_id) {}
  std::int64_t annotation_id() const { return annotation_id_; }

 private:
  std::int64_t annotation_id_;
};

/// Parses COCO keypoint JSON. Instances with no labeled keypoint are dropped; crowd
/// regions are kept with crowd = true. Extra fields (segmentation, info, licenses) are ignored.
CocoDataset parse_coco_json(const std::string& text, const DatasetSpec& spec);
CocoDataset load_coco_json(const std::string& path, const DatasetSpec& spec);
nlohmann::json to_coco_json(const CocoDataset& data);
void save_coco_json(const std::string& path, const CocoDataset& data);

/// 8-bit RGB, row-major, interleaved.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}
  std::uint8_t* px(std::size_t x, std::size_t y) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* px(std::size_t x, std::size_t y) const { return &rgb[(y * width + x) * 3]; }
};

/// Uncompressed 24-bit BMP.
Image read_bmp(const std::string& path);
void write_bmp(const std::string& path, const Image& img);
bool png_supported();
/// Throws std::runtime_error when built without PNG support.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);
/// Chooses the codec from the file extension.
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

/// [3, H, W] with values in [0, 1].
Tensor image_to_tensor(const Image& img);

/// Maps source image coordinates to crop coordinates: the source point `center` lands on
/// the crop centre, `scale` (w, h) source pixels span the crop, rotated by `rotation`
/// degrees (counter-clockwise), optionally mirrored horizontally.
struct CropTransform {
  std::array<double, 2> center{0, 0};
  std::array<double, 2> scale{1, 1};
  double rotation = 0.0;
  bool flip = false;
  std::size_t out_h = 256, out_w = 192;

  /// Row-major 2x3 affine.
  std::array<double, 6> forward_matrix() const;
  std::array<double, 6> inverse_matrix() const;
  std::array<double, 2> apply(double x, double y) const;
  std::array<double, 2> invert(double x, double y) const;
};

/// Box widened to the crop aspect (w / h = out_w / out_h) and padded by `padding`.
CropTransform crop_for_box(const Box& box, std::size_t out_h, std::size_t out_w, double padding = 1.25);

struct Augment {
  bool flip = false;  // mirror with probability 0.5
  double max_rotation = 0.0;  // degrees, uniform in [-r, r]
  double scale_jitter = 0.0;  // scale multiplied by uniform in [1 - s, 1 + s]
};

struct CropSample {
  Tensor image;  // [3, H, W]
  Pose keypoints;  // crop pixel coordinates
  CropTransform transform;
  std::size_t task = 0;
};

/// Keypoints under a transform; a mirrored transform also swaps the spec's flip pairs.
/// Labels of joints mapped outside the crop are kept.
Pose transform_pose(const Pose& pose, const CropTransform& t, const DatasetSpec& spec);

/// Bilinear warp of the instance's padded box into an (out_h, out_w) crop. Throws
/// std::invalid_argument for a zero-area box.
CropSample crop_affine(const Image& image, const PoseInstance& inst, const DatasetSpec& spec, std::size_t out_h,
                       std::size_t out_w, const Augment& augment = {}, Rng* rng = nullptr);

struct SynthOptions {
  std::size_t num_images = 64;
  std::size_t min_persons = 1;
  std::size_t max_persons = 1;
  std::size_t num_keypoints = 17;
  std::size_t width = 96, height = 96;
  std::uint64_t seed = 0;
};

struct SynthDataset {
  DatasetSpec spec;
  CocoDataset annotations;
  std::vector<Image> images;  // same order as annotations.images
};

/// Stick figures drawn on striped noise backgrounds; each joint gets its own colour.
/// Every labeled keypoint lies inside its image. 17 joints follow the COCO layout, other
/// counts form a random kinematic chain.
SynthDataset synth_generate(const SynthOptions& opt);
/// Writes images/<file_name> as BMP, annotations.json and spec.json under dir.
void save_synth(const SynthDataset& data, const std::string& dir);

/// Top-down crops of every instance, computed by up to num_workers() threads. Sample i
/// uses an Rng forked from (seed, i), so the result does not depend on the worker count.
std::vector<CropSample> make_crops(const SynthDataset& data, std::size_t out_h, std::size_t out_w,
                                   const Augment& augment = {}, std::uint64_t seed = 0);

struct BottomUpSample {
  Tensor image;  // [3, H, W]
  std::vector<Pose> persons;  // image pixel coordinates
};

/// Whole images with all their persons.
std::vector<BottomUpSample> make_bottom_up(const SynthDataset& data);

/// POSE_NUM_WORKERS when set and positive, otherwise the hardware concurrency (at least 1).
std::size_t num_workers();
/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

struct MicroBatch {
  std::size_t task = 0;
  std::vector<std::size_t> indices;  // within the task's pool
};

/// Instances drawn without replacement from the concatenation of all pools; batches are
/// consecutive slices of a per-epoch permutation (the last may be short) and are split into
/// task-homogeneous micro-batches. The permutation of epoch e depends only on (seed, e).
class MultitaskSampler {
 public:
  MultitaskSampler(std::vector<std::size_t> pool_sizes, std::size_t batch_size, std::uint64_t seed);

  std::vector<MicroBatch> next();
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;
  std::size_t pool_size() const { return total_; }

 private:
  void reshuffle();

  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace vitpose
