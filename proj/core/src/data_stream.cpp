#include "prol/data_stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "prol/errors.hpp"
#include "prol/rng.hpp"

namespace prol {

void LabeledDataset::validate() const {
    if (images.size() != labels.size()) throw contract_error("dataset: image/label count mismatch");
    if (class_count <= 0) throw contract_error("dataset: class_count must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= class_count)
            throw contract_error("dataset: label " + std::to_string(labels[i]) + " at index " +
                                 std::to_string(i) + " outside class_count " + std::to_string(class_count));
    }
    for (std::size_t i = 1; i < images.size(); ++i) {
        if (images[i].height != images[0].height || images[i].width != images[0].width ||
            images[i].channels != images[0].channels)
            throw contract_error("dataset: image shapes are not uniform");
    }
}

const TaskDescriptor& TaskSequence::task(int t) const {
    if (t < 1 || t > task_count()) throw contract_error("task id out of range: " + std::to_string(t));
    return tasks[static_cast<std::size_t>(t - 1)];
}

TaskSequence split_tasks(const LabeledDataset& dataset, int task_count, std::uint64_t seed) {
    if (task_count < 1) throw contract_error("split_tasks: task count must be >= 1");
    if (task_count > dataset.class_count)
        throw contract_error("split_tasks: cannot split " + std::to_string(dataset.class_count) +
                             " classes into " + std::to_string(task_count) + " tasks");

    std::vector<int> class_order(dataset.class_count);
    std::iota(class_order.begin(), class_order.end(), 0);
    Rng rng(derive_seed(seed, {seed_tag("split_tasks")}));
    rng.shuffle(class_order);

    int base = dataset.class_count / task_count;
    int remainder = dataset.class_count % task_count;

    TaskSequence seq;
    seq.tasks.resize(task_count);
    std::vector<int> task_of_class(dataset.class_count, -1);
    std::size_t cursor = 0;
    for (int t = 0; t < task_count; ++t) {
        int take = base + (t < remainder ? 1 : 0);
        TaskDescriptor& td = seq.tasks[t];
        td.task_id = t + 1;
        for (int i = 0; i < take; ++i) {
            int c = class_order[cursor++];
            td.classes.push_back(c);
            task_of_class[c] = t;
        }
        std::sort(td.classes.begin(), td.classes.end());
    }
    for (std::size_t i = 0; i < dataset.size(); ++i)
        seq.tasks[task_of_class[dataset.labels[i]]].sample_indices.push_back(i);
    return seq;
}

std::vector<StreamChunk> chunk_layout(const TaskDescriptor& task, int chunk_size, std::uint64_t seed) {
    if (chunk_size < 1) throw contract_error("chunk_layout: chunk size must be >= 1");
    std::vector<std::size_t> order = task.sample_indices;
    Rng rng(derive_seed(seed, {seed_tag("stream"), static_cast<std::uint64_t>(task.task_id)}));
    rng.shuffle(order);

    std::vector<StreamChunk> chunks;
    for (std::size_t start = 0; start < order.size(); start += chunk_size) {
        StreamChunk chunk;
        chunk.chunk_id = static_cast<int>(chunks.size());
        std::size_t end = std::min(order.size(), start + chunk_size);
        chunk.indices.assign(order.begin() + start, order.begin() + end);
        chunks.push_back(std::move(chunk));
    }
    return chunks;
}

bool ChunkStream::next(StreamChunk& out) {
    if (pos_ >= chunks_.size()) return false;
    out = chunks_[pos_++];
    if (visited_) {
        for (std::size_t idx : out.indices) {
            if ((*visited_)[idx])
                throw seen_once_error("sample index " + std::to_string(idx) + " emitted twice");
            (*visited_)[idx] = true;
        }
    }
    return true;
}

StreamSession::StreamSession(const LabeledDataset& dataset, const TaskSequence& sequence, int chunk_size,
                             std::uint64_t seed)
    : dataset_(&dataset),
      sequence_(sequence),
      chunk_size_(chunk_size),
      seed_(seed),
      visited_(dataset.size(), false) {}

ChunkStream StreamSession::open_task(int task_id) {
    if (!opened_.insert(task_id).second)
        throw seen_once_error("task " + std::to_string(task_id) + " was already streamed in this run");
    const TaskDescriptor& td = sequence_.task(task_id);
    ChunkStream stream;
    stream.chunks_ = chunk_layout(td, chunk_size_, seed_);
    for (auto& chunk : stream.chunks_) {
        chunk.labels.reserve(chunk.indices.size());
        for (std::size_t idx : chunk.indices) chunk.labels.push_back(dataset_->labels[idx]);
    }
    stream.visited_ = &visited_;
    return stream;
}

LabeledDataset make_synthetic(int classes, int per_class, int image_side, double separation,
                              std::uint64_t seed) {
    if (classes < 2) throw contract_error("make_synthetic: at least 2 classes required");
    if (per_class < 1) throw contract_error("make_synthetic: per_class must be >= 1");
    if (image_side < 2) throw contract_error("make_synthetic: image side must be >= 2");
    if (!(separation > 0.0)) throw contract_error("make_synthetic: separation must be > 0");

    const int channels = 3;
    const double noise_std = 1.0 / separation;
    LabeledDataset ds;
    ds.class_count = classes;
    ds.images.reserve(std::size_t(classes) * per_class);
    ds.labels.reserve(std::size_t(classes) * per_class);

    for (int c = 0; c < classes; ++c) {
        Rng class_rng(derive_seed(seed, {seed_tag("class"), static_cast<std::uint64_t>(c)}));
        double fx = 1.0 + 2.0 * class_rng.uniform();
        double fy = 1.0 + 2.0 * class_rng.uniform();
        double mean[channels], phase[channels];
        for (int ch = 0; ch < channels; ++ch) {
            mean[ch] = 0.25 + 0.5 * class_rng.uniform();
            phase[ch] = 2.0 * M_PI * class_rng.uniform();
        }
        Image tmpl(image_side, image_side, channels);
        for (int y = 0; y < image_side; ++y)
            for (int x = 0; x < image_side; ++x)
                for (int ch = 0; ch < channels; ++ch) {
                    double wave = std::sin(2.0 * M_PI * (fx * x + fy * y) / image_side + phase[ch]);
                    tmpl.at(y, x, ch) = std::clamp(mean[ch] + 0.35 * wave, 0.0, 1.0);
                }

        for (int i = 0; i < per_class; ++i) {
            Rng sample_rng(derive_seed(
                seed, {seed_tag("sample"), static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)}));
            Image img = tmpl;
            for (double& v : img.pix) v = std::clamp(v + noise_std * sample_rng.normal(), 0.0, 1.0);
            ds.images.push_back(std::move(img));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

LabeledDataset load_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw io_error("cannot open manifest: " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("class_count") || !j.contains("items"))
        throw io_error("manifest missing class_count or items: " + manifest_path.string());

    LabeledDataset ds;
    ds.class_count = j.at("class_count").get<int>();
    if (ds.class_count <= 0) throw io_error("manifest class_count must be positive");

    const auto base = manifest_path.parent_path();
    for (const auto& item : j.at("items")) {
        std::string rel = item.at("path").get<std::string>();
        int label = item.at("label").get<int>();
        if (label < 0 || label >= ds.class_count)
            throw io_error("manifest label " + std::to_string(label) + " outside class_count " +
                           std::to_string(ds.class_count) + " for " + rel);
        auto full = base / rel;
        if (!std::filesystem::exists(full)) throw io_error("manifest references missing file: " + full.string());
        ds.images.push_back(read_png(full));
        ds.labels.push_back(label);
    }
    ds.validate();
    return ds;
}

void export_manifest(const LabeledDataset& dataset, const std::filesystem::path& directory) {
    std::filesystem::create_directories(directory);
    nlohmann::ordered_json j;
    j["class_count"] = dataset.class_count;
    j["items"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%06zu.png", i);
        write_png(directory / name, dataset.images[i]);
        j["items"].push_back({{"path", name}, {"label", dataset.labels[i]}});
    }
    std::ofstream out(directory / "manifest.json");
    if (!out) throw io_error("cannot write manifest in " + directory.string());
    out << j.dump(2) << "\n";
}

std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& dataset,
                                                           double test_fraction, std::uint64_t seed) {
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw contract_error("split_train_test: test fraction must be in [0, 1)");
    std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.labels[i]].push_back(i);

    LabeledDataset train, test;
    train.class_count = test.class_count = dataset.class_count;
    for (int c = 0; c < dataset.class_count; ++c) {
        auto idx = by_class[c];
        Rng rng(derive_seed(seed, {seed_tag("traintest"), static_cast<std::uint64_t>(c)}));
        rng.shuffle(idx);
        std::size_t n_test = static_cast<std::size_t>(std::floor(idx.size() * test_fraction));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            LabeledDataset& dst = i < n_test ? test : train;
            dst.images.push_back(dataset.images[idx[i]]);
            dst.labels.push_back(dataset.labels[idx[i]]);
        }
    }
    return {std::move(train), std::move(test)};
}

std::vector<std::vector<std::size_t>> group_by_tasks(const LabeledDataset& dataset,
                                                     const TaskSequence& sequence) {
    std::vector<int> task_of_class;
    for (const auto& td : sequence.tasks)
        for (int c : td.classes) {
            if (c >= static_cast<int>(task_of_class.size())) task_of_class.resize(c + 1, -1);
            task_of_class[c] = td.task_id;
        }
    std::vector<std::vector<std::size_t>> groups(sequence.task_count());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        int label = dataset.labels[i];
        if (label >= static_cast<int>(task_of_class.size()) || task_of_class[label] < 0)
            throw contract_error("group_by_tasks: label " + std::to_string(label) +
                                 " not covered by the task sequence");
        groups[task_of_class[label] - 1].push_back(i);
    }
    return groups;
}

LabeledDataset subset_classes(const LabeledDataset& dataset, const std::vector<int>& class_ids,
                              bool relabel) {
    std::vector<int> remap(dataset.class_count, -1);
    for (std::size_t k = 0; k < class_ids.size(); ++k) {
        int c = class_ids[k];
        if (c < 0 || c >= dataset.class_count) throw contract_error("subset_classes: class id out of range");
        remap[c] = static_cast<int>(k);
    }
    LabeledDataset out;
    out.class_count = relabel ? static_cast<int>(class_ids.size()) : dataset.class_count;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        int c = dataset.labels[i];
        if (remap[c] < 0) continue;
        out.images.push_back(dataset.images[i]);
        out.labels.push_back(relabel ? remap[c] : c);
    }
    return out;
}

}  // namespace prol
