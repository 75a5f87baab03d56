#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uniap/episodic.hpp"
#include "uniap/model.hpp"
#include "uniap/synthdata.hpp"

namespace uniap::io {

// The full experiment configuration, parsed from strict JSON: unknown keys
// are rejected so typos cannot silently change an ablation.
struct RunConfig {
    model::ModelConfig model;
    episodic::TrainConfig train;
    episodic::AdaptConfig adapt;
    synthdata::DatasetSpec dataset;
    std::string manifest_dir;
    std::string output_dir = "out";
    std::string split_mode = "OOD";
    std::vector<int> shot_list = {1, 5, 10};
    // evaluation knobs
    model::TaskId eval_task = model::TaskId::PE;
    int eval_queries_per_class = 4;
    double pck_sigma = 0.2;

    std::uint64_t config_hash = 0;  // over the canonical JSON text

    void validate(bool require_paths) const;
};

RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace uniap::io
