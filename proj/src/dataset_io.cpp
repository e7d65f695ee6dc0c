#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ctxguard/errors.hpp"
#include "ctxguard/scenegen.hpp"

namespace ctxguard {

using nlohmann::json;

namespace {

constexpr int kDatasetVersion = 1;

json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

Box box_from_json(const json& j) {
  const auto v = j.get<std::vector<int>>();
  if (v.size() != 4) throw std::invalid_argument("box needs 4 entries");
  return {v[0], v[1], v[2], v[3]};
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string config_digest(const ContextModel& cm, const SceneOptions& opts) {
  json pairs = json::array();
  for (const auto& [a, b] : cm.confusable_pairs) pairs.push_back({a, b});
  const json canon = {{"groups", cm.groups},
                      {"leak_prob", cm.leak_prob},
                      {"pairs", pairs},
                      {"min_objects", opts.min_objects},
                      {"max_objects", opts.max_objects},
                      {"pixel_noise", opts.pixel_noise},
                      {"background_noise", opts.background_noise},
                      {"max_placement_attempts", opts.max_placement_attempts},
                      {"max_pairwise_iou", opts.max_pairwise_iou},
                      {"contrast", opts.contrast},
                      {"card_fill", opts.card_fill},
                      {"color_jitter", opts.color_jitter},
                      {"background_min", opts.background_min},
                      {"background_max", opts.background_max}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canon.dump())));
  return buf;
}

std::string dataset_to_string(const Dataset& ds) {
  std::string out;
  const json header = {{"version", kDatasetVersion}, {"h", kImageSide},
                       {"w", kImageSide},            {"c", kNumCategories},
                       {"seed", ds.seed},            {"split", split_name(ds.split)},
                       {"digest", ds.digest},        {"count", ds.scenes.size()}};
  out += header.dump();
  out += '\n';
  for (const Scene& s : ds.scenes) {
    std::vector<int> pixels;
    pixels.reserve(s.image.pixels().size());
    for (double v : s.image.pixels()) pixels.push_back(static_cast<int>(std::lround(v * 255.0)));
    json objects = json::array();
    for (const auto& o : s.objects) objects.push_back({{"cat", o.category}, {"box", box_json(o.box)}});
    json proposals = json::array();
    for (const auto& b : s.proposals) proposals.push_back(box_json(b));
    const json line = {{"idx", s.index},
                       {"group", s.context_group},
                       {"pixels", std::move(pixels)},
                       {"objects", std::move(objects)},
                       {"proposals", std::move(proposals)}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

Dataset dataset_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  Dataset ds;
  std::size_t expected = 0;

  if (!std::getline(in, line)) throw ParseError("missing dataset header", 1);
  ++lineno;
  try {
    const json header = json::parse(line);
    const int version = header.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw VersionError("dataset version " + std::to_string(version) + " unsupported (expected " +
                         std::to_string(kDatasetVersion) + ")");
    }
    if (header.at("h").get<int>() != kImageSide || header.at("w").get<int>() != kImageSide ||
        header.at("c").get<int>() != kNumCategories) {
      throw ParseError("dataset geometry does not match this build", lineno);
    }
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.split = parse_split(header.value("split", std::string("train")));
    ds.digest = header.value("digest", std::string());
    expected = header.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad header: ") + e.what(), lineno);
  } catch (const ArgumentError& e) {
    throw ParseError(e.what(), lineno);
  }

  const std::size_t npix = static_cast<std::size_t>(kImageSide) * kImageSide * kChannels;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Scene s;
      s.index = j.at("idx").get<int>();
      s.context_group = j.at("group").get<int>();
      const auto& px = j.at("pixels");
      if (px.size() != npix) throw ParseError("expected " + std::to_string(npix) + " pixels", lineno);
      s.image = Image(kImageSide, kImageSide);
      auto dst = s.image.pixels();
      for (std::size_t k = 0; k < npix; ++k) {
        const int v = px[k].get<int>();
        if (v < 0 || v > 255) throw ParseError("pixel value out of range", lineno);
        dst[k] = v / 255.0;
      }
      for (const auto& o : j.at("objects")) {
        GtObject g{o.at("cat").get<int>(), box_from_json(o.at("box"))};
        if (g.category < 0 || g.category >= kNumCategories)
          throw ParseError("object category out of range", lineno);
        s.objects.push_back(g);
      }
      for (const auto& b : j.at("proposals")) s.proposals.push_back(box_from_json(b));
      ds.scenes.push_back(std::move(s));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  if (ds.scenes.size() != expected) {
    throw ParseError("truncated dataset: header promises " + std::to_string(expected) +
                         " scenes, found " + std::to_string(ds.scenes.size()),
                     lineno);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << dataset_to_string(ds);
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return dataset_from_string(ss.str());
}

}  // namespace ctxguard
