"""Services package for the captioning model, training and evaluation."""
