#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <mutex>
#include <thread>

#include "vitpose/data.hpp"

namespace vitpose {

namespace {

using Pt = std::array<double, 2>;

// Joint positions in units of figure height, origin at the hip centre, y down.
std::vector<Pt> human_figure(Rng& rng) {
  auto limb = [](Pt from, double angle, double len) {
    return Pt{from[0] + len * std::sin(angle), from[1] + len * std::cos(angle)};
  };
  const double deg = std::numbers::pi / 180.0;
  std::vector<Pt> j(17);
  const double lean = rng.uniform(-8, 8) * deg;
  const Pt neck = limb({0, 0}, std::numbers::pi + lean, 0.34);
  const double head_turn = rng.uniform(-0.02, 0.02);
  j[0] = {neck[0] + head_turn, neck[1] - 0.10};
  j[1] = {j[0][0] + 0.03, j[0][1] - 0.03};
  j[2] = {j[0][0] - 0.03, j[0][1] - 0.03};
  j[3] = {j[0][0] + 0.06, j[0][1] - 0.01};
  j[4] = {j[0][0] - 0.06, j[0][1] - 0.01};
  j[5] = {neck[0] + 0.11, neck[1] + 0.02};
  j[6] = {neck[0] - 0.11, neck[1] + 0.02};
  j[11] = {0.07, 0.0};
  j[12] = {-0.07, 0.0};
  // The figure faces the viewer, so its left side is on the image right.
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? 1.0 : -1.0;
    const double arm = sgn * rng.uniform(5, 110) * deg, elbow = sgn * rng.uniform(-40, 70) * deg;
    j[7 + side] = limb(j[5 + side], arm, 0.15);
    j[9 + side] = limb(j[7 + side], arm + elbow, 0.13);
    const double hip = sgn * rng.uniform(-5, 30) * deg, knee = sgn * rng.uniform(-30, 10) * deg;
    j[13 + side] = limb(j[11 + side], hip, 0.23);
    j[15 + side] = limb(j[13 + side], hip + knee, 0.22);
  }
  return j;
}

std::vector<Pt> chain_figure(Rng& rng, std::size_t nk) {
  std::vector<Pt> j(nk);
  double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double len = 1.0 / static_cast<double>(std::max<std::size_t>(nk, 2));
  for (std::size_t i = 1; i < nk; ++i) {
    angle += rng.uniform(-1.0, 1.0);
    j[i] = {j[i - 1][0] + len * std::cos(angle), j[i - 1][1] + len * std::sin(angle)};
  }
  return j;
}

std::array<std::uint8_t, 3> joint_colour(std::size_t k, std::size_t nk) {
  const double hue = 6.0 * static_cast<double>(k) / static_cast<double>(nk);
  const double f = hue - std::floor(hue);
  const int sector = static_cast<int>(hue) % 6;
  const double v = 255, q = 255 * (1 - f), t = 255 * f;
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v, g = t; break;
    case 1: r = q, g = v; break;
    case 2: g = v, b = t; break;
    case 3: g = q, b = v; break;
    case 4: r = t, b = v; break;
    default: r = v, b = q; break;
  }
  return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
}

void fill_disc(Image& img, double cx, double cy, double r, std::array<std::uint8_t, 3> c) {
  const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - r)), x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + r));
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - r)), y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + r));
  for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(y0, 0); y <= std::min<std::ptrdiff_t>(y1, img.height - 1); ++y) {
    for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(x0, 0); x <= std::min<std::ptrdiff_t>(x1, img.width - 1); ++x) {
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
      std::uint8_t* p = img.px(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
      p[0] = c[0], p[1] = c[1], p[2] = c[2];
    }
  }
}

void draw_segment(Image& img, Pt a, Pt b, double width, std::array<std::uint8_t, 3> c) {
  const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
  const int steps = static_cast<int>(std::ceil(len * 2)) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    fill_disc(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), width * 0.5, c);
  }
}

void background(Image& img, Rng& rng) {
  const double base[3] = {rng.uniform(40, 110), rng.uniform(40, 110), rng.uniform(40, 110)};
  const double angle = rng.uniform(0, std::numbers::pi), period = rng.uniform(6, 20);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double stripe = 12.0 * std::sin(2 * std::numbers::pi * (ca * x + sa * y) / period);
      std::uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        p[c] = static_cast<std::uint8_t>(std::clamp(base[c] + stripe + rng.uniform(-8, 8), 0.0, 255.0));
      }
    }
  }
}

}  // namespace

SynthDataset synth_generate(const SynthOptions& opt) {
  if (opt.min_persons > opt.max_persons) throw std::invalid_argument("synth: min_persons > max_persons");
  if (opt.num_keypoints == 0) throw std::invalid_argument("synth: num_keypoints must be positive");
  SynthDataset out;
  if (opt.num_keypoints == 17) {
    out.spec = coco_person_spec();
  } else {
    out.spec.name = "synth" + std::to_string(opt.num_keypoints);
    out.spec.num_keypoints = opt.num_keypoints;
    out.spec.sigmas.assign(opt.num_keypoints, 0.05);
    for (std::size_t i = 1; i < opt.num_keypoints; ++i) out.spec.skeleton.push_back({i - 1, i});
  }
  out.annotations.keypoint_names = out.spec.keypoint_names;
  out.annotations.skeleton = out.spec.skeleton;
  const Rng root(opt.seed);
  const double W = static_cast<double>(opt.width), H = static_cast<double>(opt.height);
  std::int64_t next_id = 1;
  for (std::size_t n = 0; n < opt.num_images; ++n) {
    Rng rng = root.fork(n);
    Image img(opt.width, opt.height);
    background(img, rng);
    const std::size_t persons = opt.min_persons + rng.below(opt.max_persons - opt.min_persons + 1);
    const double slot = W / static_cast<double>(std::max<std::size_t>(persons, 1));
    for (std::size_t p = 0; p < persons; ++p) {
      std::vector<Pt> fig = opt.num_keypoints == 17 ? human_figure(rng) : chain_figure(rng, opt.num_keypoints);
      double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
      for (const auto& q : fig) x0 = std::min(x0, q[0]), x1 = std::max(x1, q[0]), y0 = std::min(y0, q[1]), y1 = std::max(y1, q[1]);
      // Figure scale so it fits its slot with a margin and fills 45-75% of the height.
      const double margin = 3.0;
      double size = H * rng.uniform(0.45, 0.75);
      size = std::min({size, (H - 2 * margin) / (y1 - y0), (slot - 2 * margin) / std::max(x1 - x0, 1e-9)});
      const double fw = (x1 - x0) * size, fh = (y1 - y0) * size;
      const double left = p * slot + margin + rng.uniform(0, std::max(slot - 2 * margin - fw, 0.0));
      const double top = margin + rng.uniform(0, std::max(H - 2 * margin - fh, 0.0));
      std::vector<Pt> pts(fig.size());
      for (std::size_t k = 0; k < fig.size(); ++k) {
        pts[k] = {std::round((left + (fig[k][0] - x0) * size) * 4) / 4, std::round((top + (fig[k][1] - y0) * size) * 4) / 4};
      }
      const double thick = std::max(1.0, 0.03 * size);
      const std::array<std::uint8_t, 3> limb_colour{static_cast<std::uint8_t>(rng.uniform(170, 230)),
                                                    static_cast<std::uint8_t>(rng.uniform(170, 230)),
                                                    static_cast<std::uint8_t>(rng.uniform(170, 230))};
      for (const auto& e : out.spec.skeleton) draw_segment(img, pts[e[0]], pts[e[1]], thick, limb_colour);
      for (std::size_t k = 0; k < pts.size(); ++k) {
        fill_disc(img, pts[k][0], pts[k][1], std::max(1.2, 0.035 * size), joint_colour(k, pts.size()));
      }
      PoseInstance inst;
      inst.id = next_id++;
      inst.image_id = static_cast<std::int64_t>(n + 1);
      inst.keypoints.resize(pts.size());
      for (std::size_t k = 0; k < pts.size(); ++k) inst.keypoints[k] = {pts[k][0], pts[k][1], 2, 0.0};
      const double pad = 0.08 * size;
      const double bx0 = std::max(0.0, left - pad), by0 = std::max(0.0, top - pad);
      const double bx1 = std::min(W - 1, left + fw + pad), by1 = std::min(H - 1, top + fh + pad);
      inst.bbox = {bx0, by0, bx1 - bx0, by1 - by0};
      inst.area = inst.bbox.w * inst.bbox.h;
      out.annotations.instances.push_back(std::move(inst));
    }
    out.annotations.images.push_back(
        {static_cast<std::int64_t>(n + 1), "synth_" + std::to_string(n + 1) + ".bmp", opt.width, opt.height});
    out.images.push_back(std::move(img));
  }
  return out;
}

void save_synth(const SynthDataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    write_bmp((fs::path(dir) / "images" / data.annotations.images[i].file_name).string(), data.images[i]);
  }
  save_coco_json((fs::path(dir) / "annotations.json").string(), data.annotations);
  DatasetSpec spec = data.spec;
  spec.annotations = "annotations.json";
  spec.image_root = "images";
  std::ofstream out(fs::path(dir) / "spec.json");
  out << nlohmann::json(spec).dump(1) << '\n';
}

std::size_t num_workers() {
  if (const char* env = std::getenv("POSE_NUM_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<CropSample> make_crops(const SynthDataset& data, std::size_t out_h, std::size_t out_w,
                                   const Augment& augment, std::uint64_t seed) {
  const auto& insts = data.annotations.instances;
  std::vector<CropSample> out(insts.size());
  const Rng root(seed);
  parallel_for(insts.size(), num_workers(), [&](std::size_t i) {
    Rng rng = root.fork(i);
    const auto& inst = insts[i];
    out[i] = crop_affine(data.images.at(static_cast<std::size_t>(inst.image_id - 1)), inst, data.spec, out_h, out_w,
                         augment, &rng);
  });
  return out;
}

std::vector<BottomUpSample> make_bottom_up(const SynthDataset& data) {
  std::vector<BottomUpSample> out(data.images.size());
  for (std::size_t i = 0; i < data.images.size(); ++i) out[i].image = image_to_tensor(data.images[i]);
  for (const auto& inst : data.annotations.instances) {
    out.at(static_cast<std::size_t>(inst.image_id - 1)).persons.push_back(inst.keypoints);
  }
  return out;
}

MultitaskSampler::MultitaskSampler(std::vector<std::size_t> pool_sizes, std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("sampler: batch size must be positive");
  for (std::size_t s : pool_sizes) {
    offsets_.push_back(total_);
    total_ += s;
  }
  if (total_ == 0) throw std::invalid_argument("sampler: empty pool");
  reshuffle();
}

void MultitaskSampler::reshuffle() {
  order_.resize(total_);
  for (std::size_t i = 0; i < total_; ++i) order_[i] = i;
  Rng rng = Rng(seed_).fork(epoch_);
  rng.shuffle(order_);
  cursor_ = 0;
}

std::size_t MultitaskSampler::batches_per_epoch() const { return (total_ + batch_size_ - 1) / batch_size_; }

std::vector<MicroBatch> MultitaskSampler::next() {
  if (cursor_ == total_) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(total_, cursor_ + batch_size_);
  std::vector<MicroBatch> out;
  for (std::size_t t = 0; t < offsets_.size(); ++t) {
    const std::size_t lo = offsets_[t], hi = t + 1 < offsets_.size() ? offsets_[t + 1] : total_;
    MicroBatch mb;
    mb.task = t;
    for (std::size_t i = cursor_; i < end; ++i) {
      if (order_[i] >= lo && order_[i] < hi) mb.indices.push_back(order_[i] - lo);
    }
    if (!mb.indices.empty()) out.push_back(std::move(mb));
  }
  cursor_ = end;
  return out;
}

}  // namespace vitpose
