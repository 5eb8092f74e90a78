#pragma once

#include <string>

#include "json.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

/// Container layout: 8-byte magic "TSDSNAP1", u64 little-endian header length,
/// UTF-8 JSON header, then the raw little-endian payload. The header lists
/// every tensor as {name, shape, layer, block, trainable, offset, count} with
/// offsets in elements. Only parameters are stored; "buffers" is always empty.
template <std::floating_point Scalar>
void save_params(const std::string& path, const ParamStore<Scalar>& params);

template <std::floating_point Scalar>
ParamStore<Scalar> load_params(const std::string& path);

/// Task vectors carry the model config (to rebuild tags) and provenance.
template <std::floating_point Scalar>
void save_task_vector(const std::string& path, const TaskVector<Scalar>& tv,
                      const ModelConfig& config);

template <std::floating_point Scalar>
TaskVector<Scalar> load_task_vector(const std::string& path, ModelConfig* config = nullptr);

/// Parsed header of a container, without reading the payload.
nlohmann::json read_snapshot_header(const std::string& path);

}  // namespace tsdpo
