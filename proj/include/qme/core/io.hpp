#ifndef QME_CORE_IO_HPP
#define QME_CORE_IO_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qme/core/types.hpp"

namespace qme::core {

// Manifest JSON:
//   {"subjects":[...],
//    "templates":[{"template_id":..,"subject_id":..},...],
//    "queries":[{"query_id":..,"subject_id":..,"frame_count":..},...]}
GalleryManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const GalleryManifest& manifest, const std::filesystem::path& path);

// Per-modality score CSV. Header "query_id,<template_id_1>,...", body rows of
// decimal scores with "NA" for masked entries. Round-trips bit-exactly.
ScoreMatrix load_score_csv(const std::filesystem::path& path, const std::string& modality_id);
void save_score_csv(const ScoreMatrix& scores, const std::filesystem::path& path);

// Per-modality frame-feature CSV, header "query_id,frame_index,f0,...,f{d-1}".
// Rows of one query must be contiguous and frame_index ascending from 0.
std::map<std::string, Matrix> load_feature_csv(const std::filesystem::path& path);
void save_feature_csv(const std::map<std::string, Matrix>& features,
                      const std::filesystem::path& path);

// Subject-center CSV, header "subject_id,f0,...,f{d-1}", one row per subject.
void save_center_csv(const std::vector<std::string>& subjects, const Matrix& centers,
                     const std::filesystem::path& path);
std::pair<std::vector<std::string>, Matrix> load_center_csv(const std::filesystem::path& path);

// Exact decimal round-trip formatting for doubles (shortest representation
// that parses back to the same bits); also used by checkpoint writers.
std::string format_double(double value);

}  // namespace qme::core

#endif  // QME_CORE_IO_HPP
