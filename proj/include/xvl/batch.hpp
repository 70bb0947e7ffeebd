#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xvl/error.hpp"
#include "xvl/tensor.hpp"

namespace xvl {

/// N aligned image/text feature rows with optional class labels.
class PairedBatch {
public:
    PairedBatch() = default;
    PairedBatch(Tensor image, Tensor text, std::optional<std::vector<std::size_t>> labels,
                std::string language)
        : image_(std::move(image)), text_(std::move(text)), labels_(std::move(labels)),
          language_(std::move(language)) {
        if (image_.rows() != text_.rows()) {
            throw ShapeError("paired batch: " + std::to_string(image_.rows()) + " images vs " +
                             std::to_string(text_.rows()) + " texts");
        }
        if (labels_ && labels_->size() != image_.rows()) {
            throw ShapeError("paired batch: label count does not match batch size");
        }
    }

    std::size_t size() const { return image_.rows(); }
    const Tensor& image() const { return image_; }
    const Tensor& text() const { return text_; }
    const std::string& language() const { return language_; }

    bool has_labels() const { return labels_.has_value(); }

    /// Throws MissingLabelsError on a label-free batch.
    const std::vector<std::size_t>& labels() const {
        if (!labels_) throw MissingLabelsError("batch for language '" + language_ + "' carries no labels");
        return *labels_;
    }

    PairedBatch without_labels() const { return PairedBatch(image_, text_, std::nullopt, language_); }

private:
    Tensor image_;
    Tensor text_;
    std::optional<std::vector<std::size_t>> labels_;
    std::string language_;
};

} // namespace xvl
