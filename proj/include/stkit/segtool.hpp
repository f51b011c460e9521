#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stkit/errors.hpp"

namespace stkit {

struct SegmentationParams {
    double min_length = 0.2; // seconds
    double max_length = 30.0;

    void validate() const {
        if (min_length <= 0.0 || min_length > max_length)
            throw ConfigError("SegmentationParams: need 0 < min <= max, got " +
                              std::to_string(min_length) + ".." + std::to_string(max_length));
    }
};

// Per-frame speech probability, the stand-in for a learned speech-activity
// classifier.
struct ProbabilityTrack {
    double frame_rate = 50.0; // frames per second
    std::vector<double> probabilities; // values in [0,1]

    double total_duration() const {
        return static_cast<double>(probabilities.size()) / frame_rate;
    }

    void validate() const {
        if (frame_rate <= 0.0) throw ConfigError("ProbabilityTrack: frame_rate must be > 0");
        if (probabilities.empty()) throw DataError("ProbabilityTrack: empty track");
        for (double p : probabilities)
            if (!(p >= 0.0 && p <= 1.0))
                throw DataError("ProbabilityTrack: probability outside [0,1]");
    }
};

struct Segment {
    double start = 0.0; // seconds, inclusive
    double end = 0.0; // exclusive

    double length() const { return end - start; }
};

struct SegmentationResult {
    std::vector<Segment> segments; // ordered, non-overlapping, covering the track
    bool undersized = false; // whole track shorter than min_length
};

// Divide and conquer on the probability track: while any segment exceeds
// max_length, split the longest one at its interior frame of minimum
// probability, requiring both pieces to stay >= min_length. When max <
// 2*min no admissible point exists; the split then lands as close to the
// midpoint as possible (minimizing how far the short piece falls below min),
// with probability, then earliness, breaking ties.
inline SegmentationResult segment(const ProbabilityTrack& track, const SegmentationParams& params) {
    params.validate();
    track.validate();

    SegmentationResult result;
    const std::size_t frames = track.probabilities.size();
    const double rate = track.frame_rate;
    if (track.total_duration() < params.min_length) {
        result.segments.push_back({0.0, track.total_duration()});
        result.undersized = true;
        return result;
    }

    // work in frame indices; a split at frame k puts the boundary at k/rate
    std::vector<std::pair<std::size_t, std::size_t>> spans{{0, frames}};
    const auto min_frames = params.min_length * rate;
    const auto max_frames = params.max_length * rate;

    while (true) {
        // longest span over the limit
        std::size_t pick = spans.size();
        double longest = max_frames;
        for (std::size_t i = 0; i < spans.size(); ++i) {
            const double len = static_cast<double>(spans[i].second - spans[i].first);
            if (len > longest) {
                longest = len;
                pick = i;
            }
        }
        if (pick == spans.size()) break;

        const auto [lo, hi] = spans[pick];
        std::size_t best = 0;
        bool found = false;
        double best_prob = 0.0;
        for (std::size_t k = lo + 1; k < hi; ++k) {
            const double left = static_cast<double>(k - lo);
            const double right = static_cast<double>(hi - k);
            if (left < min_frames || right < min_frames) continue;
            const double p = track.probabilities[k];
            if (!found || p < best_prob) {
                found = true;
                best = k;
                best_prob = p;
            }
        }
        if (!found) {
            // no admissible point: stay closest to the midpoint, lower
            // probability first among equally-distant frames
            double best_dist = 0.0;
            for (std::size_t k = lo + 1; k < hi; ++k) {
                const double dist = std::fabs(static_cast<double>(k - lo) - static_cast<double>(hi - k));
                const double p = track.probabilities[k];
                if (!found || dist < best_dist || (dist == best_dist && p < best_prob)) {
                    found = true;
                    best = k;
                    best_dist = dist;
                    best_prob = p;
                }
            }
            if (!found) break; // single-frame span cannot be split further
        }
        spans[pick] = {lo, best};
        spans.insert(spans.begin() + static_cast<std::ptrdiff_t>(pick) + 1, {best, hi});
    }

    std::sort(spans.begin(), spans.end());
    for (const auto& [lo, hi] : spans)
        result.segments.push_back({static_cast<double>(lo) / rate, static_cast<double>(hi) / rate});
    return result;
}

// ---------------------------------------------------------------------------
// Parameter sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    double min_length = 0.0;
    double max_length = 0.0;
    std::optional<double> score; // empty when the scorer failed
    std::size_t segment_count = 0;
    double mean_segment_length = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows; // sorted by score descending, failures last

    const SweepRow& best() const {
        if (rows.empty() || !rows.front().score)
            throw DataError("SweepResult: no scored rows");
        return rows.front();
    }
};

// Scores one (min, max) combination given the segmentations of every track.
using SweepScorer = std::function<double(const std::vector<SegmentationResult>&)>;

// Evaluates every min <= max combination of the grid. Ties rank by smaller
// max, then smaller min, so the best row is a well-defined argmax.
inline SweepResult sweep(const std::vector<ProbabilityTrack>& tracks,
                         const std::vector<SegmentationParams>& grid, const SweepScorer& scorer) {
    if (grid.empty()) throw ConfigError("sweep: empty parameter grid");
    if (tracks.empty()) throw DataError("sweep: no tracks");
    SweepResult result;
    for (const auto& params : grid) {
        if (params.min_length > params.max_length) continue;
        SweepRow row;
        row.min_length = params.min_length;
        row.max_length = params.max_length;
        std::vector<SegmentationResult> segmentations;
        segmentations.reserve(tracks.size());
        std::size_t count = 0;
        double total_len = 0.0;
        for (const auto& track : tracks) {
            segmentations.push_back(segment(track, params));
            for (const auto& seg : segmentations.back().segments) {
                ++count;
                total_len += seg.length();
            }
        }
        row.segment_count = count;
        row.mean_segment_length = count ? total_len / static_cast<double>(count) : 0.0;
        try {
            row.score = scorer(segmentations);
        } catch (const std::exception&) {
            row.score.reset(); // recorded without a score, sweep continues
        }
        result.rows.push_back(std::move(row));
    }
    std::stable_sort(result.rows.begin(), result.rows.end(), [](const SweepRow& a, const SweepRow& b) {
        if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
        if (a.score && b.score && *a.score != *b.score) return *a.score > *b.score;
        if (a.max_length != b.max_length) return a.max_length < b.max_length;
        return a.min_length < b.min_length;
    });
    return result;
}

// The search space used for tuning: min in {0.2, 2, 4, ...} and max in
// 2-second steps up to the domain's upper limit (30 s for the TED-style
// sets, 18 s for the ACL-style one).
inline std::vector<SegmentationParams> default_grid(double max_limit = 30.0, double step = 2.0) {
    std::vector<SegmentationParams> grid;
    std::vector<double> mins{0.2};
    for (double m = step; m < max_limit; m += step) mins.push_back(m);
    for (double mn : mins)
        for (double mx = std::max(step, mn); mx <= max_limit + 1e-9; mx += step)
            if (mn <= mx) grid.push_back({mn, mx});
    return grid;
}

// ---------------------------------------------------------------------------
// Track file I/O: header line "frame_rate,<value>", then a
// "frame_index,probability" header and one row per frame.
// ---------------------------------------------------------------------------

inline void save_track(const std::string& path, const ProbabilityTrack& track) {
    std::ofstream os(path);
    if (!os) throw DataError("save_track: cannot open " + path);
    os << "frame_rate," << track.frame_rate << "\n";
    os << "frame_index,probability\n";
    char buf[64];
    for (std::size_t i = 0; i < track.probabilities.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, track.probabilities[i]);
        os << buf;
    }
}

inline ProbabilityTrack load_track(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_track: cannot open " + path);
    ProbabilityTrack track;
    std::string line;
    if (!std::getline(is, line) || line.rfind("frame_rate,", 0) != 0)
        throw DataError("load_track: missing frame_rate header in " + path);
    track.frame_rate = std::stod(line.substr(std::string("frame_rate,").size()));
    if (!std::getline(is, line)) throw DataError("load_track: missing column header in " + path);
    std::size_t expected = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("load_track: malformed row '" + line + "'");
        const std::size_t idx = std::stoul(line.substr(0, comma));
        if (idx != expected)
            throw DataError("load_track: frame index " + std::to_string(idx) + ", expected " +
                            std::to_string(expected));
        track.probabilities.push_back(std::stod(line.substr(comma + 1)));
        ++expected;
    }
    track.validate();
    return track;
}

inline void save_sweep_csv(const std::string& path, const SweepResult& result) {
    std::ofstream os(path);
    if (!os) throw DataError("save_sweep_csv: cannot open " + path);
    os << "min,max,score,segments,mean_len\n";
    char buf[160];
    for (const auto& row : result.rows) {
        if (row.score)
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%zu,%.10g\n", row.min_length,
                          row.max_length, *row.score, row.segment_count, row.mean_segment_length);
        else
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,,%zu,%.10g\n", row.min_length, row.max_length,
                          row.segment_count, row.mean_segment_length);
        os << buf;
    }
}

} // namespace stkit
