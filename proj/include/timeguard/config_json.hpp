#pragma once

// JSON configuration files. Every reader starts from the given defaults,
// overrides the keys that are present and rejects unknown keys with the
// dotted path of the offending field.

#include <nlohmann/json.hpp>

#include "timeguard/datagen.hpp"
#include "timeguard/detector.hpp"
#include "timeguard/evaluation.hpp"

namespace tg::config {

using nlohmann::json;

json to_json(const clockdyn::ClockParams& c);
clockdyn::ClockParams clock_from_json(const json& j, clockdyn::ClockParams base = {}, const std::string& path = "clock");

json to_json(const datagen::ScenarioSpec& s);
datagen::ScenarioSpec scenario_from_json(const json& j, datagen::ScenarioSpec base = {},
                                         const std::string& path = "scenario");

json to_json(const detector::DetectorParams& p);
detector::DetectorParams detector_from_json(const json& j, detector::DetectorParams base = {},
                                            const std::string& path = "detector");

json to_json(const GraphSpec& g);
GraphSpec graph_from_json(const json& j, GraphSpec base = {}, const std::string& path = "graph");

json to_json(const datagen::DatasetConfig& c);
datagen::DatasetConfig dataset_from_json(const json& j, datagen::DatasetConfig base = {},
                                         const std::string& path = "dataset");

json to_json(const eval::EvalOptions& o);
eval::EvalOptions eval_from_json(const json& j, eval::EvalOptions base = {}, const std::string& path = "evaluation");

/// Parses a file; syntax errors become ValidationError with the path.
json read_file(const std::filesystem::path& path);

}  // namespace tg::config
