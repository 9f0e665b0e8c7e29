#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "prol/image.hpp"

namespace prol {

struct LabeledDataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int class_count = 0;

    std::size_t size() const { return images.size(); }
    // Checks label range and uniform image shape.
    void validate() const;
};

struct TaskDescriptor {
    int task_id = 0;                       // 1-based
    std::vector<int> classes;              // sorted, disjoint across tasks
    std::vector<std::size_t> sample_indices;  // into the owning dataset
};

struct TaskSequence {
    std::vector<TaskDescriptor> tasks;
    int task_count() const { return static_cast<int>(tasks.size()); }
    const TaskDescriptor& task(int t) const;  // 1-based
};

// Shuffles class ids by seed then cuts contiguous blocks; remainder classes go
// one-per-task to the earliest tasks. Throws contract_error when T exceeds the
// class count.
TaskSequence split_tasks(const LabeledDataset& dataset, int task_count, std::uint64_t seed);

struct StreamChunk {
    int chunk_id = 0;
    std::vector<std::size_t> indices;  // into the streamed dataset
    std::vector<int> labels;
    std::size_t size() const { return indices.size(); }
};

// Pure chunk layout for one task: indices shuffled by (seed, task_id), cut
// into chunk_size pieces, last chunk possibly partial.
std::vector<StreamChunk> chunk_layout(const TaskDescriptor& task, int chunk_size, std::uint64_t seed);

// One-shot chunk iterator over a task.
class ChunkStream {
public:
    ChunkStream() = default;
    bool next(StreamChunk& out);
    std::size_t total_chunks() const { return chunks_.size(); }

private:
    friend class StreamSession;
    std::vector<StreamChunk> chunks_;
    std::size_t pos_ = 0;
    std::vector<bool>* visited_ = nullptr;
};

// Run-scoped stream state: tracks which tasks were opened and keeps the
// sample-visit bitmap that makes the seen-once constraint checkable.
class StreamSession {
public:
    StreamSession(const LabeledDataset& dataset, const TaskSequence& sequence, int chunk_size,
                  std::uint64_t seed);

    // Throws seen_once_error if the task was already streamed in this run.
    ChunkStream open_task(int task_id);

    const std::vector<bool>& visited() const { return visited_; }
    const TaskSequence& sequence() const { return sequence_; }
    const LabeledDataset& dataset() const { return *dataset_; }
    int chunk_size() const { return chunk_size_; }

private:
    const LabeledDataset* dataset_;
    TaskSequence sequence_;
    int chunk_size_;
    std::uint64_t seed_;
    std::set<int> opened_;
    std::vector<bool> visited_;
};

// Class templates are a per-class sinusoidal spatial pattern plus a per-class
// color mean; samples add Gaussian pixel noise with std 1/separation, so a
// larger separation gives higher linear separability. Samples are ordered
// class-major and the whole dataset is a pure function of the arguments.
LabeledDataset make_synthetic(int classes, int per_class, int image_side, double separation,
                              std::uint64_t seed);

// Manifest: UTF-8 JSON {"class_count": int, "items": [{"path", "label"}, ...]},
// image paths relative to the manifest file, PNG format.
LabeledDataset load_manifest(const std::filesystem::path& manifest_path);
void export_manifest(const LabeledDataset& dataset, const std::filesystem::path& directory);

// Stratified per-class split; test_fraction of each class is held out.
std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& dataset,
                                                           double test_fraction, std::uint64_t seed);

// Groups dataset indices by the task owning their label. Labels not covered by
// the sequence raise a contract error.
std::vector<std::vector<std::size_t>> group_by_tasks(const LabeledDataset& dataset,
                                                     const TaskSequence& sequence);

// Keeps only the listed classes; when relabel is set labels become the
// position within class_ids.
LabeledDataset subset_classes(const LabeledDataset& dataset, const std::vector<int>& class_ids,
                              bool relabel);

}  // namespace prol
