#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "vitpose/data.hpp"
#include "vitpose/metrics.hpp"

namespace vitpose {

using nlohmann::json;

void validate(const DatasetSpec& s) {
  const auto bad = [&](const std::string& why) { throw std::invalid_argument("dataset " + s.name + ": " + why); };
  if (s.num_keypoints == 0) bad("num_keypoints must be positive");
  if (s.sigmas.size() != s.num_keypoints) {
    bad(std::to_string(s.sigmas.size()) + " sigmas for " + std::to_string(s.num_keypoints) + " keypoints");
  }
  if (!s.keypoint_names.empty() && s.keypoint_names.size() != s.num_keypoints) {
    bad(std::to_string(s.keypoint_names.size()) + " keypoint names for " + std::to_string(s.num_keypoints) +
        " keypoints");
  }
  for (const auto& e : s.skeleton) {
    if (e[0] >= s.num_keypoints || e[1] >= s.num_keypoints) bad("skeleton edge out of range");
  }
  for (const auto& e : s.flip_pairs) {
    if (e[0] >= s.num_keypoints || e[1] >= s.num_keypoints) bad("flip pair out of range");
  }
}

void validate(const std::vector<DatasetSpec>& specs) {
  std::set<std::size_t> ids;
  for (const auto& s : specs) {
    validate(s);
    if (!ids.insert(s.task_id).second) {
      throw std::invalid_argument("task id " + std::to_string(s.task_id) + " used by more than one dataset");
    }
  }
}

void to_json(json& j, const DatasetSpec& s) {
  j = json{{"name", s.name},
           {"task_id", s.task_id},
           {"num_keypoints", s.num_keypoints},
           {"keypoint_names", s.keypoint_names},
           {"skeleton", s.skeleton},
           {"flip_pairs", s.flip_pairs},
           {"sigmas", s.sigmas},
           {"annotations", s.annotations},
           {"image_root", s.image_root}};
}

void from_json(const json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.name = j.value("name", d.name);
  s.task_id = j.value("task_id", d.task_id);
  s.num_keypoints = j.value("num_keypoints", d.num_keypoints);
  s.keypoint_names = j.value("keypoint_names", d.keypoint_names);
  s.skeleton = j.value("skeleton", d.skeleton);
  s.flip_pairs = j.value("flip_pairs", d.flip_pairs);
  s.sigmas = j.value("sigmas", d.sigmas);
  s.annotations = j.value("annotations", d.annotations);
  s.image_root = j.value("image_root", d.image_root);
}

DatasetSpec load_dataset_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset spec " + path);
  DatasetSpec s = json::parse(in).get<DatasetSpec>();
  validate(s);
  return s;
}

DatasetSpec coco_person_spec() {
  DatasetSpec s;
  s.name = "coco";
  s.num_keypoints = 17;
  s.keypoint_names = {"nose",        "left_eye",    "right_eye",  "left_ear",    "right_ear",   "left_shoulder",
                      "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
                      "right_hip",   "left_knee",   "right_knee", "left_ankle",  "right_ankle"};
  s.skeleton = {{15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12}, {5, 6}, {5, 7}, {6, 8},
                {7, 9},   {8, 10},  {1, 2},   {0, 1},   {0, 2},   {1, 3},  {2, 4},  {3, 5}, {4, 6}};
  s.flip_pairs = {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}, {11, 12}, {13, 14}, {15, 16}};
  s.sigmas = coco_sigmas();
  return s;
}

const ImageInfo& CocoDataset::image(std::int64_t id) const {
  auto it = std::find_if(images.begin(), images.end(), [&](const ImageInfo& i) { return i.id == id; });
  if (it == images.end()) throw std::out_of_range("no image with id " + std::to_string(id));
  return *it;
}

CocoDataset parse_coco_json(const std::string& text, const DatasetSpec& spec) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed annotation JSON at byte " + std::to_string(e.byte) + ": " + e.what(), e.byte);
  }
  CocoDataset out;
  for (const auto& im : doc.value("images", json::array())) {
    out.images.push_back({im.at("id").get<std::int64_t>(), im.value("file_name", std::string()),
                          im.value("width", std::size_t{0}), im.value("height", std::size_t{0})});
  }
  for (const auto& cat : doc.value("categories", json::array())) {
    if (!cat.contains("keypoints")) continue;
    out.keypoint_names = cat.at("keypoints").get<std::vector<std::string>>();
    for (const auto& e : cat.value("skeleton", json::array())) {
      out.skeleton.push_back({e.at(0).get<std::size_t>() - 1, e.at(1).get<std::size_t>() - 1});
    }
    break;
  }
  const std::size_t nk = spec.num_keypoints;
  for (const auto& a : doc.value("annotations", json::array())) {
    const std::int64_t id = a.at("id").get<std::int64_t>();
    const json kp = a.value("keypoints", json::array());
    if (kp.size() != 3 * nk) {
      throw SpecMismatchError("annotation " + std::to_string(id) + ": expected " + std::to_string(3 * nk) +
                                  " keypoint values for " + spec.name + ", got " + std::to_string(kp.size()),
                              id);
    }
    PoseInstance inst;
    inst.id = id;
    inst.image_id = a.at("image_id").get<std::int64_t>();
    inst.task = spec.task_id;
    inst.crowd = a.value("iscrowd", 0) != 0;
    inst.area = a.value("area", 0.0);
    if (a.contains("bbox")) {
      const auto& b = a.at("bbox");
      inst.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    }
    inst.keypoints.resize(nk);
    std::size_t labeled = 0;
    for (std::size_t k = 0; k < nk; ++k) {
      inst.keypoints[k].x = kp[3 * k].get<double>();
      inst.keypoints[k].y = kp[3 * k + 1].get<double>();
      inst.keypoints[k].v = static_cast<int>(kp[3 * k + 2].get<double>());
      labeled += inst.keypoints[k].v > 0;
    }
    if (labeled == 0) continue;
    out.instances.push_back(std::move(inst));
  }
  return out;
}

CocoDataset load_coco_json(const std::string& path, const DatasetSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open annotations " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_coco_json(ss.str(), spec);
}

json to_coco_json(const CocoDataset& data) {
  json images = json::array(), anns = json::array(), skel = json::array();
  for (const auto& im : data.images) {
    images.push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
  }
  for (const auto& inst : data.instances) {
    json kp = json::array();
    std::size_t labeled = 0;
    for (const auto& k : inst.keypoints) {
      kp.push_back(k.x);
      kp.push_back(k.y);
      kp.push_back(k.v);
      labeled += k.v > 0;
    }
    anns.push_back({{"id", inst.id},
                    {"image_id", inst.image_id},
                    {"category_id", 1},
                    {"keypoints", kp},
                    {"num_keypoints", labeled},
                    {"bbox", {inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h}},
                    {"area", inst.area},
                    {"iscrowd", inst.crowd ? 1 : 0}});
  }
  for (const auto& e : data.skeleton) skel.push_back({e[0] + 1, e[1] + 1});
  json cat = {{"id", 1},
              {"name", "person"},
              {"supercategory", "person"},
              {"keypoints", data.keypoint_names},
              {"skeleton", skel}};
  return {{"images", images}, {"annotations", anns}, {"categories", json::array({cat})}};
}

void save_coco_json(const std::string& path, const CocoDataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_coco_json(data).dump(1) << '\n';
}

}  // namespace vitpose
