#pragma once

#include <string>
#include <variant>
#include <vector>

namespace edalane {

struct DownsampleStage {
    int out_channels = 0;
    bool operator==(const DownsampleStage&) const = default;
};

struct EdaBlockStage {
    std::string name;
    int growth = 0;
    std::vector<int> dilations; // one EDA module per entry
    bool operator==(const EdaBlockStage&) const = default;
};

struct HeadStage {
    int upsample_factor = 1;
    bool operator==(const HeadStage&) const = default;
};

using Stage = std::variant<DownsampleStage, EdaBlockStage, HeadStage>;

// An architecture schedule: the network topology as data. Stage order is
// execution order; the single head stage is always last.
struct ArchitectureSpec {
    std::string name;
    int input_channels = 3;
    std::vector<Stage> stages;

    bool operator==(const ArchitectureSpec&) const = default;

    // Throws std::invalid_argument naming the violated invariant.
    void validate() const;

    int downsample_count() const;
    int head_factor() const;
    // Channel count entering the head stage.
    int channels_before_head() const;
};

// UTF-8 JSON, schema:
//   {"name": S, "input_channels": N, "stages": [
//     {"type":"downsample","out_channels":N} |
//     {"type":"eda_block","name":S,"growth":K,"dilations":[...]} |
//     {"type":"head","upsample_factor":F} ]}
// Unknown keys are rejected. parse(serialize(spec)) == spec.
ArchitectureSpec parse_spec(const std::string& text);
std::string serialize_spec(const ArchitectureSpec& spec);

// The nine published networks plus their tiny-* desk-scale counterparts.
ArchitectureSpec preset(const std::string& name);
std::vector<std::string> preset_names();

// Desk-scale transform: growth 8, every-other dilation entry per block, the
// third downsample removed (widths 12/24), x4 head.
ArchitectureSpec make_tiny(const ArchitectureSpec& full);

} // namespace edalane
